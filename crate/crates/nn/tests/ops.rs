use dit_nn::gradcheck::{op_suite, grad_check};
use dit_nn::layers::{stochastic_depth, Linear};
use dit_nn::{seeded_rng, Graph, NnError, ParamStore, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn maxpool_picks_window_max() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.max_pool2x2(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[4.0]);
}

#[test]
fn transposed_conv_doubles_spatial_dims() {
    let mut rng = seeded_rng(0);
    let mut g = Graph::new();
    let x = g.input(Tensor::randn(&[1, 3, 14, 14], 1.0, &mut rng));
    let w = g.input(Tensor::randn(&[3, 5, 2, 2], 1.0, &mut rng));
    let y = g.conv_transpose2x2(x, w, None).unwrap();
    // (in - 1) * 2 + 2
    assert_eq!(g.shape(y), &[1, 5, (14 - 1) * 2 + 2, (14 - 1) * 2 + 2]);
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[2, 7], 3.25));
    let y = g.softmax(x);
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 7.0).abs() < 1e-7);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.input_grad(t(&[3], &[1.0, -2.0, 7.0]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.input_grad(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn repeated_backward_accumulates_parameter_gradients() {
    let mut rng = seeded_rng(3);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "fc", 3, 2, 1.0, &mut rng);
    let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let grads = {
        let mut g = Graph::with_params(&store);
        let xv = g.input(x);
        let y = lin.forward(&mut g, xv).unwrap();
        let l = g.sum(y);
        let a = g.backward(l).unwrap();
        let b = g.backward(l).unwrap();
        (a, b)
    };
    grads.0.accumulate(&mut store);
    let once = store.get(lin.weight).grad.clone();
    grads.1.accumulate(&mut store);
    let twice = store.get(lin.weight).grad.clone();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.input_grad(Tensor::ones(&[2]));
    assert!(matches!(g.backward(x), Err(NnError::NotScalar(_))));
}

#[test]
fn shape_errors_carry_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::ones(&[2, 3]));
    let b = g.input(Tensor::ones(&[4, 5]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn layer_norm_output_is_standardized() {
    let mut rng = seeded_rng(5);
    let mut g = Graph::new();
    let x = g.input(Tensor::randn(&[6, 32], 3.0, &mut rng));
    let gamma = g.input(Tensor::ones(&[32]));
    let beta = g.input(Tensor::zeros(&[32]));
    let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
    for row in g.value(y).data().chunks(32) {
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 32.0;
        let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-5, "{mean}");
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}

/// Direct nested-loop convolution, independent of im2col/gemm.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f32> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = seeded_rng(9);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 3)] {
        let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, k, k], 1.0, &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let expected = naive_conv(&x, &w, stride, pad);
        for (a, b) in g.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}

#[test]
fn every_op_passes_gradient_check_on_three_seeds() {
    for seed in 0..3 {
        for check in op_suite(seed).unwrap() {
            assert!(check.passed(), "seed {seed}: {} error {:.3e}", check.name, check.max_error);
        }
    }
}

#[test]
fn smooth_l1_and_cross_entropy_gradients() {
    let mut rng = seeded_rng(4);
    let logits = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let err = grad_check(|g, x| g.cross_entropy(x, &[0, 3, 1, 1, 2]), &logits, 1e-2).unwrap();
    assert!(err < 1e-3, "{err}");
    let pred = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let target = Tensor::zeros(&[3, 4]);
    let err = grad_check(|g, x| g.smooth_l1(x, target.clone(), 1.0 / 9.0, 3.0), &pred, 1e-3).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn stochastic_depth_modes() {
    let mut rng = seeded_rng(1);
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[64, 3], 1.5));
    assert_eq!(stochastic_depth(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(stochastic_depth(&mut g, x, 0.7, false, &mut rng).unwrap(), x);
    let y = stochastic_depth(&mut g, x, 0.5, true, &mut rng).unwrap();
    let mut kept = 0;
    for row in g.value(y).data().chunks(3) {
        assert!(row.iter().all(|&v| v == 0.0) || row.iter().all(|&v| v == 3.0));
        kept += usize::from(row[0] == 3.0);
    }
    assert!(kept > 0 && kept < 64);
}

#[test]
fn store_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ditc");
    let mut rng = seeded_rng(2);
    let mut store = ParamStore::new();
    Linear::new(&mut store, "vit/fc", 4, 3, 1.0, &mut rng);
    store.save(&path).unwrap();
    let mut other = ParamStore::new();
    Linear::new(&mut other, "vit/fc", 4, 3, 1.0, &mut seeded_rng(99));
    other.load_strict(&path).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
        assert_eq!(a.value, b.value);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f32..30.0, 1..40), k in 1usize..6) {
        let rows = vals.len() / k;
        prop_assume!(rows > 0);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[rows, k], vals[..rows * k].to_vec()).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(k) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let x = Tensor::randn(&[a, b, c], 1.0, &mut seeded_rng(seed));
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let p = g.permute(xv, &[2, 0, 1]).unwrap();
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }
}

#[test]
fn auxiliary_op_gradients() {
    let mut rng = seeded_rng(12);
    let x = Tensor::randn(&[1, 2, 3, 5], 1.0, &mut rng);
    let r = Tensor::randn(&[1, 2, 7, 4], 1.0, &mut rng);
    let err = grad_check(
        |g, v| {
            let y = g.interpolate_bilinear(v, 7, 4)?;
            let y = g.mul_const(y, r.clone())?;
            Ok(g.sum(y))
        },
        &x,
        1e-2,
    )
    .unwrap();
    assert!(err < 1e-3, "interpolate {err}");

    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let repl = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[2, 6, 4], 1.0, &mut rng);
    let mask = [true, false, true, false, false, true];
    let err = grad_check(
        |g, v| {
            let rp = g.input(repl.clone());
            let s = g.select_rows(v, rp, &mask)?;
            let c = g.concat(&[s, v], 1)?;
            let c = g.mul_const(c, w.clone())?;
            let m = g.mean_axis(c, 1)?;
            let b = g.input(Tensor::ones(&[4]));
            let m = g.add_broadcast(m, b)?;
            let p = g.softmax(m);
            let l = g.ln(p);
            let l = g.add_scalar(l, 2.0);
            g.mse(l, Tensor::zeros(&[2, 4]))
        },
        &x,
        1e-2,
    )
    .unwrap();
    assert!(err < 1e-3, "composite {err}");
}

#[test]
fn straight_through_forwards_hard_value_and_soft_gradient() {
    let mut g = Graph::new();
    let soft = g.input_grad(t(&[3], &[0.2, 0.5, 0.3]));
    let st = g.straight_through(soft, t(&[3], &[0.0, 1.0, 0.0])).unwrap();
    let w = g.input(t(&[3], &[1.0, 2.0, 3.0]));
    let y = g.mul(st, w).unwrap();
    let l = g.sum(y);
    assert_eq!(g.scalar_f64(l).unwrap(), 2.0);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(soft).unwrap().data(), &[1.0, 2.0, 3.0]);
}
