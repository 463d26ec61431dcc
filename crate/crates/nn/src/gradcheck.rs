//! Finite-difference verification of analytic gradients.
//!
//! Scalar reductions keep an f64 copy of their value (see
//! [`Graph::scalar_f64`]), so central differences are not swamped by the
//! rounding of the final f32 sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::layers::MultiHeadAttention;
use crate::param::ParamStore;
use crate::tensor::Tensor;

fn eval_scalar<F>(store: &ParamStore, f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    let v = g.scalar_f64(y)?;
    if !v.is_finite() {
        return Err(NnError::NonFinite("grad_check objective"));
    }
    Ok(v)
}

/// Max over coordinates of `|g_analytic − g_fd| / max(1, |g_fd|)` for the
/// gradient of scalar `f` at `x`, using central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_in(&ParamStore::new(), f, x, eps)
}

/// [`grad_check`] for objectives that read parameters from `store`.
pub fn grad_check_in<F>(store: &ParamStore, f: F, x: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let xv = g.input_grad(x.clone());
        let y = f(&mut g, xv)?;
        let grads = g.backward(y)?;
        grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi_x = probe.data()[i];
        let hi = eval_scalar(store, &f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo_x = probe.data()[i];
        let lo = eval_scalar(store, &f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (hi - lo) / (hi_x as f64 - lo_x as f64);
        let err = (analytic.data()[i] as f64 - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks gradients with respect to the parameters in `store`, probing at
/// most `max_coords` evenly spaced coordinates per tensor.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f32, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let y = f(&mut g)?;
        g.backward(y)?
    };
    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let y = f(&mut g)?;
        let v = g.scalar_f64(y)?;
        if !v.is_finite() {
            return Err(NnError::NonFinite("grad_check objective"));
        }
        Ok(v)
    };
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let hi_x = probe.value(id).data()[i];
            let hi = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let lo_x = probe.value(id).data()[i];
            let lo = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let fd = (hi - lo) / (hi_x as f64 - lo_x as f64);
            let err = (analytic.data()[i] as f64 - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Result of checking one operation.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

pub const PRIMITIVE_TOLERANCE: f64 = 1e-3;
pub const COMPOSITE_TOLERANCE: f64 = 1e-2;
const EPS: f32 = 1e-2;

/// `sum(y * r)` for a fixed random `r`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let r = Tensor::rand_uniform(g.shape(y), -1.0, 1.0, rng);
    let p = g.mul_const(y, r)?;
    Ok(g.sum(p))
}

/// Tensor of distinct values spaced well beyond `2 * EPS`, in shuffled order.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Runs the finite-difference check over every primitive op and multi-head
/// attention, on shapes drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |name, err: f64, tol| {
        out.push(OpCheck {
            name,
            max_error: err,
            tolerance: tol,
        })
    };

    // matmul: gradient w.r.t. each operand in turn
    {
        let (m, k, n) = (dim(&mut rng, 2, 5), dim(&mut rng, 2, 5), dim(&mut rng, 2, 5));
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let seed_r = rng.random::<u64>();
        let bc = b.clone();
        let e1 = grad_check(
            |g, x| {
                let bv = g.input(bc.clone());
                let y = g.matmul(x, bv)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &a,
            EPS,
        )?;
        let ac = a.clone();
        let e2 = grad_check(
            |g, x| {
                let av = g.input(ac.clone());
                let y = g.matmul(av, x)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &b,
            EPS,
        )?;
        record("matmul", e1.max(e2), PRIMITIVE_TOLERANCE);
    }

    // conv2d with stride and padding
    {
        let (c, o) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
        let (h, w) = (dim(&mut rng, 4, 6), dim(&mut rng, 4, 6));
        let stride = dim(&mut rng, 1, 2);
        let x = Tensor::randn(&[2, c, h, w], 1.0, &mut rng);
        let wt = Tensor::randn(&[o, c, 3, 3], 0.5, &mut rng);
        let bias = Tensor::randn(&[o], 0.5, &mut rng);
        let seed_r = rng.random::<u64>();
        let (wc, bc) = (wt.clone(), bias.clone());
        let e1 = grad_check(
            |g, xv| {
                let (wv, bv) = (g.input(wc.clone()), g.input(bc.clone()));
                let y = g.conv2d(xv, wv, Some(bv), stride, 1)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &x,
            EPS,
        )?;
        let xc = x.clone();
        let e2 = grad_check(
            |g, wv| {
                let (xv, bv) = (g.input(xc.clone()), g.input(bc.clone()));
                let y = g.conv2d(xv, wv, Some(bv), stride, 1)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &wt,
            EPS,
        )?;
        record("conv2d", e1.max(e2), PRIMITIVE_TOLERANCE);
    }

    // transposed conv, stride 2 kernel 2
    {
        let (ci, co) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
        let (h, w) = (dim(&mut rng, 2, 4), dim(&mut rng, 2, 4));
        let x = Tensor::randn(&[2, ci, h, w], 1.0, &mut rng);
        let wt = Tensor::randn(&[ci, co, 2, 2], 0.5, &mut rng);
        let seed_r = rng.random::<u64>();
        let wc = wt.clone();
        let e1 = grad_check(
            |g, xv| {
                let wv = g.input(wc.clone());
                let y = g.conv_transpose2x2(xv, wv, None)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &x,
            EPS,
        )?;
        let xc = x.clone();
        let e2 = grad_check(
            |g, wv| {
                let xv = g.input(xc.clone());
                let y = g.conv_transpose2x2(xv, wv, None)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &wt,
            EPS,
        )?;
        record("transposed_conv2d", e1.max(e2), PRIMITIVE_TOLERANCE);
    }

    // max pooling on well-separated values
    {
        let (h, w) = (2 * dim(&mut rng, 1, 3), 2 * dim(&mut rng, 1, 3));
        let x = separated(&[1, 2, h, w], &mut rng);
        let seed_r = rng.random::<u64>();
        let e = grad_check(
            |g, xv| {
                let y = g.max_pool2x2(xv)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &x,
            EPS,
        )?;
        record("maxpool2d", e, PRIMITIVE_TOLERANCE);
    }

    // layer norm, gradient w.r.t. input and affine parameters
    {
        let (rows, d) = (dim(&mut rng, 2, 4), dim(&mut rng, 3, 8));
        let x = Tensor::randn(&[rows, d], 1.0, &mut rng);
        let gamma = Tensor::rand_uniform(&[d], 0.5, 1.5, &mut rng);
        let beta = Tensor::randn(&[d], 0.5, &mut rng);
        let seed_r = rng.random::<u64>();
        let (gc, bc) = (gamma.clone(), beta.clone());
        let e1 = grad_check(
            |g, xv| {
                let (gv, bv) = (g.input(gc.clone()), g.input(bc.clone()));
                let y = g.layer_norm(xv, gv, bv, 1e-5)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &x,
            EPS,
        )?;
        let xc = x.clone();
        let e2 = grad_check(
            |g, gv| {
                let (xv, bv) = (g.input(xc.clone()), g.input(bc.clone()));
                let y = g.layer_norm(xv, gv, bv, 1e-5)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &gamma,
            EPS,
        )?;
        record("layer_norm", e1.max(e2), PRIMITIVE_TOLERANCE);
    }

    // softmax
    {
        let (rows, k) = (dim(&mut rng, 1, 4), dim(&mut rng, 2, 8));
        let x = Tensor::randn(&[rows, k], 1.0, &mut rng);
        let seed_r = rng.random::<u64>();
        let e = grad_check(
            |g, xv| {
                let y = g.softmax(xv);
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &x,
            EPS,
        )?;
        record("softmax", e, PRIMITIVE_TOLERANCE);
    }

    // gelu
    {
        let n = dim(&mut rng, 3, 12);
        let x = Tensor::randn(&[n], 1.5, &mut rng);
        let seed_r = rng.random::<u64>();
        let e = grad_check(
            |g, xv| {
                let y = g.gelu(xv);
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &x,
            EPS,
        )?;
        record("gelu", e, PRIMITIVE_TOLERANCE);
    }

    // embedding lookup (with a repeated index)
    {
        let (v, d) = (dim(&mut rng, 3, 6), dim(&mut rng, 2, 5));
        let table = Tensor::randn(&[v, d], 1.0, &mut rng);
        let mut idx: Vec<usize> = (0..4).map(|_| rng.random_range(0..v)).collect();
        idx.push(idx[0]);
        let seed_r = rng.random::<u64>();
        let e = grad_check(
            |g, t| {
                let y = g.gather_rows(t, &idx)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &table,
            EPS,
        )?;
        record("embedding", e, PRIMITIVE_TOLERANCE);
    }

    // elementwise add / mul against a second random operand
    {
        let shape = [dim(&mut rng, 1, 4), dim(&mut rng, 1, 4)];
        let a = Tensor::randn(&shape, 1.0, &mut rng);
        let b = Tensor::randn(&shape, 1.0, &mut rng);
        let seed_r = rng.random::<u64>();
        let bc = b.clone();
        let e_add = grad_check(
            |g, xv| {
                let bv = g.input(bc.clone());
                let y = g.add(xv, bv)?;
                let y = g.mul(y, xv)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &a,
            EPS,
        )?;
        record("add_mul", e_add, PRIMITIVE_TOLERANCE);
    }

    // multi-head self-attention, 2 heads, sequence length 4
    {
        let d = 2 * dim(&mut rng, 2, 4);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "attn", d, 2, 0.5, &mut rng);
        let x = Tensor::randn(&[1, 4, d], 1.0, &mut rng);
        let seed_r = rng.random::<u64>();
        let e = grad_check_in(
            &store,
            |g, xv| {
                let y = attn.forward(g, xv)?;
                weighted_sum(g, y, &mut ChaCha8Rng::seed_from_u64(seed_r))
            },
            &x,
            1e-3,
        )?;
        record("attention", e, COMPOSITE_TOLERANCE);
    }

    Ok(out)
}
