use dit_core::dvae::{Dvae, DvaeConfig};
use dit_core::imaging::Image;
use dit_core::mim::*;
use dit_core::synthdoc::{generate_documents, CorpusSpec};
use dit_core::vit::VitConfig;
use dit_nn::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn count(m: &[bool]) -> usize {
    m.iter().filter(|&&b| b).count()
}

#[test]
fn default_grid_mask_counts() {
    let mut rng = dit_nn::seeded_rng(0);
    for _ in 0..200 {
        let c = count(&blockwise_mask(&mut rng, 14, 14, 0.4, 16).unwrap());
        assert!((79..=196).contains(&c));
    }
    assert!(count(&blockwise_mask(&mut rng, 14, 14, 1.0 / 196.0, 16).unwrap()) >= 1);
    let a = blockwise_mask(&mut dit_nn::seeded_rng(5), 14, 14, 0.4, 16).unwrap();
    let b = blockwise_mask(&mut dit_nn::seeded_rng(5), 14, 14, 0.4, 16).unwrap();
    assert_eq!(a, b);
}

#[test]
fn head_shapes_and_zero_weights() {
    let mut store = ParamStore::new();
    let head = MimHead::new(&mut store, 64, 8192, &mut dit_nn::seeded_rng(0));
    let mut g = Graph::inference(&store);
    let s = g.input(Tensor::randn(&[79, 64], 1.0, &mut dit_nn::seeded_rng(1)));
    let l = head.forward(&mut g, s).unwrap();
    assert_eq!(g.shape(l), &[79, 8192]);

    let mut store = ParamStore::new();
    let head = MimHead::new(&mut store, 64, 64, &mut dit_nn::seeded_rng(0));
    store.get_mut(head.linear.weight).value = Tensor::zeros(&[64, 64]);
    let mut g = Graph::inference(&store);
    let s = g.input(Tensor::randn(&[5, 64], 1.0, &mut dit_nn::seeded_rng(1)));
    let l = head.forward(&mut g, s).unwrap();
    assert_eq!(g.shape(l), &[5, 64]);
    assert!(g.value(l).data().iter().all(|&v| v == 0.0));
}

#[test]
fn loss_values() {
    for (k, expect) in [(8192usize, 13.0 * 2f64.ln()), (64, 6.0 * 2f64.ln())] {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(&[3, k]));
        let loss = mim_loss(&mut g, l, &[0, 1, k - 1]).unwrap();
        assert!((g.scalar_f64(loss).unwrap() - expect).abs() < 1e-4);
        assert!((uniform_loss(k) - expect).abs() < 1e-12);
    }
    assert!((uniform_loss(8192) - 9.0109).abs() < 1e-4);
    let mut onehot = vec![0.0f32; 2 * 64];
    onehot[3] = 50.0;
    onehot[64 + 7] = 50.0;
    let mut g = Graph::new();
    let l = g.input(Tensor::new(&[2, 64], onehot).unwrap());
    let loss = mim_loss(&mut g, l, &[3, 7]).unwrap();
    assert!(g.scalar_f64(loss).unwrap() < 1e-6);
    assert!(mim_loss(&mut g, l, &[3, 64]).is_err());
}

fn loaded_tokenizer() -> Dvae {
    let mut d = Dvae::new(DvaeConfig::tiny(), 0).unwrap();
    d.mark_loaded();
    d
}

fn corpus(n: usize) -> Vec<Image> {
    generate_documents(n, 4, &CorpusSpec { width: 96, height: 96, ..Default::default() })
        .unwrap()
        .into_iter()
        .map(|d| d.image)
        .collect()
}

fn small_cfg(steps: u64) -> PretrainConfig {
    PretrainConfig { steps, batch_size: 2, warmup_steps: steps.min(2), image_size: 64, min_block: 2, seed: 3, ..Default::default() }
}

#[test]
fn zero_steps_write_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = MimModel::new(VitConfig::tiny(), 64, 1).unwrap();
    let init = m.store.clone();
    let r = pretrain(&mut m, &corpus(2), &loaded_tokenizer(), &small_cfg(0), Some(dir.path())).unwrap();
    assert!(r.log.is_empty());
    let saved = dit_nn::checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    let init: Vec<(String, Tensor)> = init.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert_eq!(saved, init);
}

#[test]
fn pretrain_logs_are_reproducible() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MimModel::new(VitConfig::tiny(), 64, 1).unwrap();
        let cfg = PretrainConfig { checkpoint_every: 2, ..small_cfg(4) };
        let r = pretrain(&mut m, &corpus(3), &loaded_tokenizer(), &cfg, Some(dir.path())).unwrap();
        assert_eq!(r.checkpoints.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("step,lr,loss\n1,"));
        (csv, std::fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn pretrain_rejects_bad_inputs() {
    let mut m = MimModel::new(VitConfig::tiny(), 64, 1).unwrap();
    let unloaded = Dvae::new(DvaeConfig::tiny(), 0).unwrap();
    assert!(pretrain(&mut m, &corpus(1), &unloaded, &small_cfg(1), None).is_err());
    assert!(pretrain(&mut m, &[], &loaded_tokenizer(), &small_cfg(1), None).is_err());
    let mut m8 = MimModel::new(VitConfig { patch_size: 8, ..VitConfig::tiny() }, 64, 1).unwrap();
    let err = pretrain(&mut m8, &corpus(1), &loaded_tokenizer(), &small_cfg(1), None).unwrap_err();
    assert!(err.to_string().contains("grid"), "{err}");
}

#[test]
fn config_rejects_unknown_keys() {
    assert!(serde_json::from_str::<PretrainConfig>(r#"{"steps": 3, "bogus": 1}"#).is_err());
    let c: PretrainConfig = serde_json::from_str(r#"{"steps": 3}"#).unwrap();
    assert_eq!((c.steps, c.mask_ratio, c.min_block, c.batch_size), (3, 0.4, 16, 2048));
}

fn masked_loss_and_grad(model: &MimModel, x: &Tensor, mask: &[bool], targets: &[usize]) -> (f64, Tensor) {
    let mut g = Graph::with_params(&model.store);
    let xv = g.input_grad(x.clone());
    let l = model.loss(&mut g, xv, (4, 4), mask, targets, false, &mut dit_nn::seeded_rng(0)).unwrap();
    let v = g.scalar_f64(l).unwrap();
    let grad = g.backward(l).unwrap().wrt(xv).unwrap().clone();
    (v, grad)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_fraction_bounded(seed in any::<u64>(), gh in 4usize..16, gw in 4usize..16, ratio in 0.1f64..0.6, min_block in 1usize..20) {
        let n = gh * gw;
        let m = blockwise_mask(&mut dit_nn::seeded_rng(seed), gh, gw, ratio, min_block).unwrap();
        let frac = count(&m) as f64 / n as f64;
        prop_assert!(frac >= ratio - 1e-9);
        prop_assert!(frac <= ratio + max_block_area(n) as f64 / n as f64 + 1e-9);
    }

    #[test]
    fn masked_pixels_do_not_affect_loss(seed in any::<u64>()) {
        let model = MimModel::new(VitConfig::tiny(), 64, seed).unwrap();
        let mask = blockwise_mask(&mut dit_nn::seeded_rng(seed), 4, 4, 0.4, 2).unwrap();
        let targets: Vec<usize> = (0..count(&mask)).map(|i| (i * 7) % 64).collect();
        let x = Tensor::randn(&[1, 16, 256], 1.0, &mut dit_nn::seeded_rng(seed));
        let mut scrambled = x.clone();
        let noise = Tensor::randn(&[1, 16, 256], 3.0, &mut dit_nn::seeded_rng(seed ^ 9));
        for (r, &m) in mask.iter().enumerate() {
            if m {
                scrambled.data_mut()[r * 256..(r + 1) * 256].copy_from_slice(&noise.data()[r * 256..(r + 1) * 256]);
            }
        }
        let (a, grad) = masked_loss_and_grad(&model, &x, &mask, &targets);
        let (b, _) = masked_loss_and_grad(&model, &scrambled, &mask, &targets);
        prop_assert_eq!(a, b);
        for (r, &m) in mask.iter().enumerate() {
            let row = &grad.data()[r * 256..(r + 1) * 256];
            if m {
                prop_assert!(row.iter().all(|&v| v == 0.0));
            } else {
                prop_assert!(row.iter().any(|&v| v != 0.0));
            }
        }
    }
}
