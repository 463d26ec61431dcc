use dit_core::dvae::*;
use dit_core::imaging::{resize, Image};
use dit_core::synthdoc::{generate_documents, CorpusSpec};
use dit_nn::gradcheck::grad_check;
use dit_nn::{Graph, Tensor};
use proptest::prelude::*;

type R = dit_nn::Rng;

fn logits_shape(cfg: DvaeConfig, w: usize, h: usize) -> Vec<usize> {
    let d = Dvae::new(cfg, 0).unwrap();
    let mut g = Graph::inference(&d.store);
    let x = g.input(Tensor::zeros(&[1, 1, h, w]));
    let l = d.encode(&mut g, x).unwrap();
    g.shape(l).to_vec()
}

#[test]
fn encoder_grid_shapes() {
    assert_eq!(logits_shape(DvaeConfig::full(), 112, 112), vec![1, 8192, 14, 14]);
    assert_eq!(logits_shape(DvaeConfig::tiny(), 8, 8), vec![1, 64, 1, 1]);
    assert_eq!(logits_shape(DvaeConfig::tiny(), 224, 224), vec![1, 64, 28, 28]);
    let d = Dvae::new(DvaeConfig::tiny(), 0).unwrap();
    let mut g = Graph::inference(&d.store);
    let x = g.input(Tensor::zeros(&[1, 1, 20, 16]));
    assert!(d.encode(&mut g, x).is_err());
}

#[test]
fn decoder_grid_shapes() {
    let d = Dvae::new(DvaeConfig::tiny(), 0).unwrap();
    for (gh, gw) in [(14, 14), (1, 1)] {
        let mut g = Graph::inference(&d.store);
        let w = g.input(Tensor::full(&[gh * gw, 64], 1.0 / 64.0));
        let out = d.decode(&mut g, w, 1, gh, gw).unwrap();
        assert_eq!(g.shape(out), &[1, 1, 8 * gh, 8 * gw]);
    }
    let mut g = Graph::inference(&d.store);
    let w = g.input(Tensor::zeros(&[5, 64]));
    assert!(d.decode(&mut g, w, 1, 2, 2).is_err());
}

#[test]
fn near_zero_temperature_gives_one_hot() {
    let mut g = Graph::new();
    let l = g.input(Tensor::new(&[2, 4], vec![0.1, 2.0, -1.0, 1.5, 3.0, 3.0, 0.0, 1.0]).unwrap());
    let (soft, idx) = quantize_gumbel::<R>(&mut g, l, TEMPERATURE_FLOOR, None, false).unwrap();
    assert_eq!(idx, vec![1, 0]);
    assert_eq!(&g.value(soft).data()[..4], &[0.0, 1.0, 0.0, 0.0]);
    let (hard, _) = quantize_gumbel::<R>(&mut g, l, TEMPERATURE_FLOOR, None, true).unwrap();
    assert_eq!(g.value(hard).data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn uniform_logits_without_noise_are_uniform() {
    let mut g = Graph::new();
    let l = g.input(Tensor::full(&[3, 8], 0.7));
    let (w, _) = quantize_gumbel::<R>(&mut g, l, 1.0, None, false).unwrap();
    assert!(g.value(w).data().iter().all(|&v| (v - 0.125).abs() < 1e-7));
    assert!(quantize_gumbel::<R>(&mut g, l, 0.0, None, false).is_err());
}

#[test]
fn seeded_noise_is_reproducible() {
    let logits = Tensor::randn(&[10, 16], 1.0, &mut dit_nn::seeded_rng(1));
    let run = || {
        let mut g = Graph::new();
        let l = g.input(logits.clone());
        quantize_gumbel(&mut g, l, 0.5, Some(&mut dit_nn::seeded_rng(4)), true).unwrap().1
    };
    assert_eq!(run(), run());
}

#[test]
fn straight_through_gradient_matches_soft_path() {
    let x = Tensor::randn(&[3, 5], 1.0, &mut dit_nn::seeded_rng(2));
    let probe = Tensor::randn(&[3, 5], 1.0, &mut dit_nn::seeded_rng(3));
    let objective = |hard: bool| {
        let probe = probe.clone();
        move |g: &mut Graph, v| {
            let (w, _) = quantize_gumbel::<R>(g, v, 0.7, None, hard).map_err(|e| dit_nn::NnError::invalid("probe", e.to_string()))?;
            let y = g.mul_const(w, probe.clone())?;
            Ok(g.sum(y))
        }
    };
    let grad = |hard: bool| {
        let mut g = Graph::new();
        let v = g.input_grad(x.clone());
        let y = objective(hard)(&mut g, v).unwrap();
        g.backward(y).unwrap().wrt(v).unwrap().clone()
    };
    assert_eq!(grad(true), grad(false));
    assert!(grad_check(objective(false), &x, 1e-3).unwrap() < 1e-3);
}

#[test]
fn loss_examples() {
    let t = Tensor::full(&[1, 1, 2, 2], 0.3);
    let uniform = vec![1.0 / 64.0; 64];
    let l = dvae_loss(&t, &t, &uniform, 0.1).unwrap();
    assert_eq!(l.mse, 0.0);
    assert!(l.perplexity_loss.abs() < 1e-6);
    let mut single = vec![0.0; 64];
    single[5] = 1.0;
    let l = dvae_loss(&t, &Tensor::zeros(&[1, 1, 2, 2]), &single, 0.1).unwrap();
    assert!((l.perplexity_loss - 1.0).abs() < 1e-12);
    assert!((l.mse - 0.09).abs() < 1e-7);
    assert!((l.total - (l.mse + 0.1f32 as f64)).abs() < 1e-12);
    assert!(dvae_loss(&t, &t, &[0.5, 0.4], 0.1).is_err());
}

#[test]
fn temperature_decays_from_one() {
    assert_eq!(temperature_at(0, 100), 1.0);
    assert!((temperature_at(100, 100) - (-5.0f32).exp()).abs() < 1e-7);
    assert!(temperature_at(50, 100) < temperature_at(49, 100));
}

fn pages(n: usize, side: usize) -> Vec<Image> {
    generate_documents(n, 21, &CorpusSpec::default())
        .unwrap()
        .into_iter()
        .map(|d| resize(&d.image, side, side).unwrap())
        .collect()
}

#[test]
fn tokenize_full_codebook_grid() {
    let mut d = Dvae::new(DvaeConfig::full(), 0).unwrap();
    let img = pages(1, 112).remove(0);
    assert!(matches!(d.tokenize(&img), Err(dit_core::CoreError::NotLoaded { .. })));
    d.mark_loaded();
    let t = d.tokenize(&img).unwrap();
    assert_eq!((t.grid_h, t.grid_w, t.indices.len()), (14, 14, 196));
    assert!(t.indices.iter().all(|&i| i < 8192));
    assert_eq!(t, d.tokenize(&img).unwrap());
}

#[test]
fn zero_epochs_keep_initialization_and_checkpoint_round_trips() {
    let mut d = Dvae::new(DvaeConfig::tiny(), 3).unwrap();
    let init = d.store.clone();
    let stats = d.train(&pages(2, 32), &DvaeTrainConfig { epochs: 0, ..Default::default() }).unwrap();
    assert!(stats.is_empty());
    for ((_, a), (_, b)) in init.iter().zip(d.store.iter()) {
        assert_eq!(a.value, b.value);
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("dvae.ditc");
    d.save(&p).unwrap();
    let back = Dvae::load(&p).unwrap();
    assert_eq!(back.config, d.config);
    let img = pages(1, 32).remove(0);
    assert_eq!(back.tokenize(&img).unwrap(), d.tokenize(&img).unwrap());
    assert!(d.train(&[], &DvaeTrainConfig::default()).is_err());
}

#[test]
fn single_image_overfits() {
    let img = pages(1, 32);
    let mut d = Dvae::new(DvaeConfig::tiny(), 0).unwrap();
    let before = d.evaluate(&img, DEFAULT_LAMBDA).unwrap().mse;
    d.train(&img, &DvaeTrainConfig { epochs: 300, batch_size: 1, ..Default::default() }).unwrap();
    let after = d.evaluate(&img, DEFAULT_LAMBDA).unwrap();
    assert!(after.mse < 0.02 && after.mse < 0.1 * before, "{before} -> {}", after.mse);
    let rec = d.reconstruct(&img[0]).unwrap();
    assert_eq!((rec.width, rec.height, rec.channels), (32, 32, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn encode_decode_restores_dims(gh in 1usize..5, gw in 1usize..5, seed in any::<u64>()) {
        let d = Dvae::new(DvaeConfig::tiny(), seed).unwrap();
        let x = Tensor::rand_uniform(&[1, 1, 8 * gh, 8 * gw], 0.0, 1.0, &mut dit_nn::seeded_rng(seed));
        let mut g = Graph::inference(&d.store);
        let xv = g.input(x);
        let l = d.encode(&mut g, xv).unwrap();
        let rows = d.logits_rows(&mut g, l).unwrap();
        let (w, _) = quantize_gumbel(&mut g, rows, 1.0, Some(&mut dit_nn::seeded_rng(seed)), true).unwrap();
        let out = d.decode(&mut g, w, 1, gh, gw).unwrap();
        prop_assert_eq!(g.shape(out), &[1, 1, 8 * gh, 8 * gw]);
        let p = g.softmax(rows);
        let mean = g.mean_axis(p, 0).unwrap();
        let v = g.value(mean).data();
        prop_assert!(v.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((v.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-4);
    }
}
