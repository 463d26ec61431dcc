//! Desk-scale acceptance suite. Run with `cargo test -p dit-core --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dit_core::coco::{CocoAnnotation, Detection};
use dit_core::detect::*;
use dit_core::dvae::{Dvae, DvaeConfig, DvaeTrainConfig};
use dit_core::imaging::{patchify, resize, Image};
use dit_core::metrics::{accuracy, map_range, match_detections, prf1, weighted_f1};
use dit_core::mim::{blockwise_mask, max_block_area, pretrain, MimModel, PretrainConfig, FINAL_CHECKPOINT, LOSS_LOG};
use dit_core::synthdoc::{generate_documents, CorpusItem, CorpusSpec, NUM_TEMPLATES};
use dit_core::vit::{param_count, Vit, VitConfig};
use dit_nn::gradcheck::{grad_check_in, grad_check_params, op_suite, COMPOSITE_TOLERANCE};
use dit_nn::{Graph, NnError, ParamStore, Tensor};
use rand::Rng;

mod common;

type Outcome = Result<(bool, String), String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn run(&mut self, id: &str, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let res = f();
        let took = t.elapsed();
        let (ok, detail) = match res {
            Ok((ok, d)) => (ok, d),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = took <= budget;
        let pass = ok && in_time;
        if !pass {
            self.failed += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        let slow = if in_time { String::new() } else { format!(", over budget {budget:?}") };
        println!("[{tag}] {id} {name} ({:.1}s{slow}): {detail}", took.as_secs_f64());
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn c1_weighted_f1() -> Outcome {
    let first = weighted_f1([96.97, 95.99, 95.14, 90.22]).map_err(e2s)?;
    let large = weighted_f1([97.83, 97.41, 96.29, 92.93]).map_err(e2s)?;
    let ok = (first - 94.23).abs() <= 0.01 && (large - 95.85).abs() <= 0.01;
    Ok((ok, format!("{first:.4} (want 94.23), {large:.4} (want 95.85)")))
}

fn c2_param_counts() -> Outcome {
    let b = param_count(&VitConfig::base()) as f64;
    let l = param_count(&VitConfig::large()) as f64;
    let rb = b / 87e6 - 1.0;
    let rl = l / 304e6 - 1.0;
    let ok = rb.abs() <= 0.03 && rl.abs() <= 0.03;
    Ok((ok, format!("base {:.2}M ({:+.2}%), large {:.2}M ({:+.2}%)", b / 1e6, rb * 100.0, l / 1e6, rl * 100.0)))
}

fn c3_shapes() -> Outcome {
    let mut notes = Vec::new();
    let seq = patchify(&Image::filled(224, 224, 1, 200.0), 16).map_err(e2s)?;
    let patches_ok = seq.len() == 196 && (seq.grid_h, seq.grid_w) == (14, 14);
    notes.push(format!("224px -> {} patches", seq.len()));

    let mut tok = Dvae::new(DvaeConfig::tiny(), 0).map_err(e2s)?;
    tok.mark_loaded();
    let map = tok.tokenize(&Image::filled(112, 112, 1, 200.0)).map_err(e2s)?;
    let tokens_ok = (map.grid_h, map.grid_w) == (14, 14);
    notes.push(format!("112px -> {}x{} tokens", map.grid_h, map.grid_w));

    let taps = VitConfig::base().fpn_taps();
    let taps_ok = taps == [4, 6, 8, 12];
    notes.push(format!("d=12 taps {taps:?}"));

    let mut store = ParamStore::new();
    let fpn = Fpn::new(&mut store, 16, FpnConfig { channels: 8, inner_norm: true }, &mut dit_nn::seeded_rng(0));
    let mut g = Graph::inference(&store);
    let t: Vec<_> = (0..4).map(|_| g.input(Tensor::zeros(&[1, 196, 16]))).collect();
    let maps = fpn.forward(&mut g, &t, (14, 14)).map_err(e2s)?;
    let dims: Vec<usize> = maps.iter().map(|&m| g.shape(m)[2]).collect();
    let square = maps.iter().all(|&m| g.shape(m)[2] == g.shape(m)[3]);
    let pyr_ok = dims == [56, 28, 14, 7] && square;
    notes.push(format!("pyramid {dims:?}"));
    Ok((patches_ok && tokens_ok && taps_ok && pyr_ok, notes.join(", ")))
}

fn to_nn(e: dit_core::CoreError) -> NnError {
    NnError::invalid("acceptance", e.to_string())
}

fn encoder_grad(seed: u64) -> Result<f64, String> {
    let mut store = ParamStore::new();
    let vit = Vit::new(&mut store, VitConfig { depth: 1, ..VitConfig::tiny() }, &mut dit_nn::seeded_rng(seed)).map_err(e2s)?;
    let x = Tensor::randn(&[1, 4, 64], 1.0, &mut dit_nn::seeded_rng(seed + 10));
    let w = Tensor::randn(&[1, 4, 64], 1.0, &mut dit_nn::seeded_rng(seed + 99));
    grad_check_in(
        &store,
        |g, v| {
            let out = vit.encode(g, v, &[1], false, &mut dit_nn::seeded_rng(0)).map_err(to_nn)?;
            let y = g.mul_const(out.last, w.clone())?;
            Ok(g.sum(y))
        },
        &x,
        1e-3,
    )
    .map_err(e2s)
}

fn detection_grad(seed: u64) -> Result<f64, String> {
    let anchor_cfg = AnchorConfig::preset(AnchorPreset::Text);
    let anchors: Vec<_> = (0..2).flat_map(|l| gen_anchors(l, 16, 16, &anchor_cfg)).collect();
    let gts = [([2.0, 3.0, 5.0, 4.0], 1), ([8.0, 6.0, 7.0, 9.0], 2)];
    let targets = assign_targets(&anchors, &gts, POS_IOU, NEG_IOU).map_err(e2s)?;
    let mut store = ParamStore::new();
    let head = DetHead::new(&mut store, 3, 2, 3, &mut dit_nn::seeded_rng(seed));
    for id in [head.cls.weight, head.reg.weight] {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::randn(&shape, 0.3, &mut dit_nn::seeded_rng(seed + 10));
    }
    let x = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut dit_nn::seeded_rng(seed + 20));
    let out_of = |g: &mut Graph, m: dit_nn::Var| -> dit_nn::Result<HeadOutput> {
        let maps = extend_pyramid(g, vec![m]).map_err(to_nn)?;
        head.forward(g, &maps).map_err(to_nn)
    };
    let selection = {
        let mut g = Graph::inference(&store);
        let m = g.input(x.clone());
        let out = out_of(&mut g, m).map_err(e2s)?;
        select_targets(g.value(out.cls), &[targets], 3).map_err(e2s)?
    };
    let loss = |g: &mut Graph, m: dit_nn::Var| -> dit_nn::Result<dit_nn::Var> {
        let out = out_of(g, m)?;
        detection_loss(g, out, &selection).map(|l| l.total).map_err(to_nn)
    };
    let ex = grad_check_in(&store, loss, &x, 1e-2).map_err(e2s)?;
    let ep = grad_check_params(
        &store,
        |g| {
            let m = g.input(x.clone());
            loss(g, m)
        },
        1e-2,
        8,
    )
    .map_err(e2s)?;
    Ok(ex.max(ep))
}

fn c4_gradients() -> Outcome {
    let mut ok = true;
    let mut worst_op = (0.0f64, "");
    let mut failing = Vec::new();
    for seed in 0..3 {
        for c in op_suite(seed).map_err(e2s)? {
            if !c.passed() {
                ok = false;
                failing.push(format!("{}@{seed}={:.2e}", c.name, c.max_error));
            }
            if c.max_error > worst_op.0 {
                worst_op = (c.max_error, c.name);
            }
        }
    }
    let mut enc = 0.0f64;
    let mut det = 0.0f64;
    for seed in 0..3 {
        enc = enc.max(encoder_grad(seed)?);
        det = det.max(detection_grad(seed)?);
    }
    ok &= enc < COMPOSITE_TOLERANCE && det < COMPOSITE_TOLERANCE;
    let mut detail = format!(
        "worst primitive {} {:.2e} (< 1e-3), encoder {enc:.2e}, detection loss {det:.2e} (< 1e-2)",
        worst_op.1, worst_op.0
    );
    if !failing.is_empty() {
        detail.push_str(&format!("; failing {}", failing.join(" ")));
    }
    Ok((ok, detail))
}

fn c5_masks() -> Outcome {
    let cap = max_block_area(196);
    let mut rng = dit_nn::seeded_rng(2024);
    let (mut lo, mut hi) = (usize::MAX, 0);
    for _ in 0..1000 {
        let n = blockwise_mask(&mut rng, 14, 14, 0.4, 16).map_err(e2s)?.iter().filter(|&&b| b).count();
        lo = lo.min(n);
        hi = hi.max(n);
    }
    let a = blockwise_mask(&mut dit_nn::seeded_rng(7), 14, 14, 0.4, 16).map_err(e2s)?;
    let b = blockwise_mask(&mut dit_nn::seeded_rng(7), 14, 14, 0.4, 16).map_err(e2s)?;
    let ok = lo >= 79 && hi <= 79 + cap && a == b;
    Ok((ok, format!("|mask| in [{lo}, {hi}], bound [79, {}], deterministic {}", 79 + cap, a == b)))
}

fn small_tokenizer(images: &[Image]) -> Result<Dvae, String> {
    let small: Vec<Image> = images.iter().take(16).map(|i| resize(i, 112, 112)).collect::<Result<_, _>>().map_err(e2s)?;
    let mut tok = Dvae::new(DvaeConfig::tiny(), 0).map_err(e2s)?;
    tok.train(&small, &DvaeTrainConfig { epochs: 50, batch_size: 8, ..Default::default() }).map_err(e2s)?;
    Ok(tok)
}

fn c6_mim(tok: &mut Option<Dvae>) -> Outcome {
    let docs = generate_documents(64, 5, &CorpusSpec::default()).map_err(e2s)?;
    let images: Vec<Image> = docs.into_iter().map(|d| d.image).collect();
    let t = small_tokenizer(&images)?;
    let mut model = MimModel::new(VitConfig::tiny(), 64, 0).map_err(e2s)?;
    let cfg = PretrainConfig { steps: 200, batch_size: 8, warmup_steps: 20, ..Default::default() };
    let report = pretrain(&mut model, &images, &t, &cfg, None).map_err(e2s)?;
    *tok = Some(t);
    let initial = report.log.first().map(|r| r.loss).ok_or("empty log")?;
    let last = report.smoothed_final_loss(20).ok_or("empty log")?;
    let ln64 = 64f64.ln();
    let ok = (initial - ln64).abs() <= 0.2 && last < 0.5 * ln64;
    Ok((ok, format!("initial {initial:.3} (ln 64 = {ln64:.3} ± 0.2), smoothed final {last:.3} (< {:.3})", 0.5 * ln64)))
}

fn c7_dvae() -> Outcome {
    let docs = generate_documents(16, 3, &CorpusSpec::default()).map_err(e2s)?;
    let images: Vec<Image> = docs.iter().map(|d| resize(&d.image, 112, 112)).collect::<Result<_, _>>().map_err(e2s)?;
    let mut m = Dvae::new(DvaeConfig::tiny(), 0).map_err(e2s)?;
    let before = m.evaluate(&images, 0.1).map_err(e2s)?;
    // 16 images in batches of 8: 2 steps per epoch
    let cfg = DvaeTrainConfig { epochs: 100, batch_size: 8, lr: 5e-4, lambda: 0.1, seed: 0 };
    m.train(&images, &cfg).map_err(e2s)?;
    let after = m.evaluate(&images, 0.1).map_err(e2s)?;
    let ok = after.mse < 0.5 * before.mse && after.perplexity_loss < 0.9;
    Ok((
        ok,
        format!(
            "mse {:.4} -> {:.4} (ratio {:.3} < 0.5), perplexity_loss {:.3} (< 0.9)",
            before.mse,
            after.mse,
            after.mse / before.mse,
            after.perplexity_loss
        ),
    ))
}

fn c8_detection() -> Outcome {
    let mut mix = [0.0; NUM_TEMPLATES];
    // templates holding tables and figures
    for i in [1, 4, 5, 6, 7, 8, 9, 10, 11] {
        mix[i] = 1.0;
    }
    let docs = generate_documents(20, 3, &CorpusSpec { width: 128, height: 128, mix }).map_err(e2s)?;
    let items: Vec<CorpusItem> = docs
        .into_iter()
        .enumerate()
        .map(|(i, d)| CorpusItem { image_id: i as u64 + 1, ..d.into() })
        .collect();
    let categories = vec![4, 5];
    let cfg = DetectorConfig {
        vit: VitConfig::tiny(),
        fpn: FpnConfig { channels: 32, inner_norm: true },
        anchors: AnchorConfig::preset(AnchorPreset::Layout),
        categories: categories.clone(),
        binarize: false,
    };
    let mut det = Detector::new(cfg, 0).map_err(e2s)?;
    let tc = DetTrainConfig { steps: 800, batch_size: 4, peak_lr: 1e-3, warmup_steps: 80, weight_decay: 0.0, ..Default::default() };
    let log = train_detector(&mut det, &items, &tc).map_err(e2s)?;
    let preds = predict_corpus(&det, &items, EVAL_SCORE_THR).map_err(e2s)?;
    let gts = corpus_annotations(&items, &categories);
    let m = match_detections(&preds, &gts, 0.5);
    let s = prf1(m.tp, m.fp, m.fn_);
    Ok((
        s.f1 >= 0.9,
        format!(
            "F1@0.5 {:.3} (tp {} fp {} fn {}, {} gts), loss {:.3} -> {:.3}",
            s.f1,
            m.tp,
            m.fp,
            m.fn_,
            gts.len(),
            log.first().map_or(f64::NAN, |r| r.loss),
            log.last().map_or(f64::NAN, |r| r.loss)
        ),
    ))
}

fn c9_classification() -> Outcome {
    use dit_core::classify::*;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for t in 0..NUM_TEMPLATES {
        for d in generate_documents(10, 100 + t as u64, &CorpusSpec::only(t, 224, 224)).map_err(e2s)? {
            images.push(d.image);
            labels.push(d.class_id);
        }
    }
    let cfg = ClassifierConfig { vit: VitConfig::tiny(), num_classes: NUM_TEMPLATES, image_size: 112 };
    let mut c = Classifier::new(cfg, 0).map_err(e2s)?;
    let tc = ClsTrainConfig { epochs: 20, batch_size: 16, peak_lr: 1e-3, warmup_epochs: 2, weight_decay: 0.05, seed: 0 };
    train_classifier(&mut c, &images, &labels, &tc).map_err(e2s)?;
    let refs: Vec<&Image> = images.iter().collect();
    let acc = accuracy(&c.predict(&refs).map_err(e2s)?, &labels).map_err(e2s)?;
    Ok((acc >= 0.95, format!("train accuracy {acc:.3} on {} images (>= 0.95)", images.len())))
}

fn det(image_id: u64, category_id: u32, bbox: [f32; 4], score: f32) -> Detection {
    Detection { image_id, category_id, bbox, score }
}

fn gt(image_id: u64, category_id: u32, bbox: [f32; 4]) -> CocoAnnotation {
    CocoAnnotation { id: 0, image_id, category_id, bbox }
}

fn hand_scenarios() -> Vec<(Vec<Detection>, Vec<CocoAnnotation>)> {
    let a = [0.0, 0.0, 10.0, 10.0];
    let b = [20.0, 0.0, 10.0, 10.0];
    let c = [0.0, 20.0, 20.0, 10.0];
    vec![
        (vec![det(1, 1, a, 0.9)], vec![gt(1, 1, a)]),
        (vec![det(1, 1, a, 0.9), det(1, 1, [1.0, 0.0, 10.0, 10.0], 0.8)], vec![gt(1, 1, a)]),
        (vec![det(1, 1, b, 0.9), det(1, 1, a, 0.5)], vec![gt(1, 1, a), gt(1, 1, c)]),
        (vec![det(1, 1, a, 0.4), det(1, 1, b, 0.4), det(1, 1, c, 0.4)], vec![gt(1, 1, b), gt(1, 1, c)]),
        (vec![det(1, 1, [0.0, 0.0, 10.0, 8.0], 0.7), det(1, 2, c, 0.9)], vec![gt(1, 1, a), gt(1, 2, [0.0, 21.0, 19.0, 10.0])]),
        (vec![det(1, 1, a, 0.9), det(2, 1, a, 0.8), det(2, 2, b, 0.7), det(1, 2, b, 0.6)], vec![gt(2, 1, a), gt(1, 2, b), gt(2, 2, c)]),
        (vec![], vec![gt(1, 1, a)]),
        (vec![det(1, 1, a, 0.9)], vec![]),
    ]
}

fn c10_map_oracle() -> Outcome {
    let mut scenarios = hand_scenarios();
    let pool = [
        [0.0, 0.0, 10.0, 10.0],
        [1.0, 1.0, 10.0, 9.0],
        [2.0, 0.0, 9.0, 10.0],
        [20.0, 20.0, 8.0, 8.0],
        [21.0, 19.0, 8.0, 9.0],
        [0.0, 20.0, 12.0, 6.0],
    ];
    let scores = [0.9, 0.7, 0.7, 0.3];
    let mut rng = dit_nn::seeded_rng(10);
    for _ in 0..3000 {
        let np = rng.random_range(0..=4);
        let ng = rng.random_range(0..=3);
        let preds = (0..np)
            .map(|_| det(rng.random_range(1..=2), rng.random_range(1..=2), pool[rng.random_range(0..pool.len())], scores[rng.random_range(0..4)]))
            .collect();
        let gts = (0..ng).map(|_| gt(rng.random_range(1..=2), rng.random_range(1..=2), pool[rng.random_range(0..pool.len())])).collect();
        scenarios.push((preds, gts));
    }
    let mut worst = 0.0f64;
    for (p, g) in &scenarios {
        let got = map_range(p, g, &[1, 2]).overall;
        let want = common::oracle_map(p, g, &[1, 2]);
        worst = worst.max((got - want).abs());
    }
    Ok((worst < 1e-9, format!("{} scenarios, max |mAP - oracle| = {worst:.1e}", scenarios.len())))
}

fn c11_determinism(tok: &Option<Dvae>) -> Outcome {
    let fallback;
    let tok = match tok {
        Some(t) => t,
        None => {
            let mut t = Dvae::new(DvaeConfig::tiny(), 0).map_err(e2s)?;
            t.mark_loaded();
            fallback = t;
            &fallback
        }
    };
    let images: Vec<Image> = generate_documents(8, 11, &CorpusSpec::default()).map_err(e2s)?.into_iter().map(|d| d.image).collect();
    let run = || -> Result<(Vec<u8>, Vec<u8>), String> {
        let dir = tempfile::tempdir().map_err(e2s)?;
        let mut model = MimModel::new(VitConfig::tiny(), 64, 3).map_err(e2s)?;
        let cfg = PretrainConfig { steps: 12, batch_size: 4, warmup_steps: 2, checkpoint_every: 6, seed: 9, ..Default::default() };
        pretrain(&mut model, &images, tok, &cfg, Some(dir.path())).map_err(e2s)?;
        let csv = std::fs::read(dir.path().join(LOSS_LOG)).map_err(e2s)?;
        let ckpt = std::fs::read(dir.path().join(FINAL_CHECKPOINT)).map_err(e2s)?;
        Ok((csv, ckpt))
    };
    let (a, b) = (run()?, run()?);
    let ok = a == b;
    Ok((ok, format!("loss csv identical {}, checkpoint identical {} ({} bytes)", a.0 == b.0, a.1 == b.1, a.1.len())))
}

fn main() -> ExitCode {
    let mut s = Suite { failed: 0 };
    let secs = Duration::from_secs;
    let mut tok = None;
    s.run("C1", "weighted F1 table rows", secs(1), c1_weighted_f1);
    s.run("C2", "parameter counts", secs(10), c2_param_counts);
    s.run("C3", "shape contracts", secs(10), c3_shapes);
    s.run("C4", "gradient suite", secs(120), c4_gradients);
    s.run("C5", "blockwise masks", secs(10), c5_masks);
    s.run("C6", "MIM desk-scale learning", secs(300), || c6_mim(&mut tok));
    s.run("C7", "dVAE desk-scale learning", secs(300), c7_dvae);
    s.run("C8", "detection overfit", secs(600), c8_detection);
    s.run("C9", "classification overfit", secs(300), c9_classification);
    s.run("C10", "mAP brute-force equivalence", secs(10), c10_map_oracle);
    s.run("C11", "pre-training determinism", secs(300), || c11_determinism(&tok));
    println!("{} of 11 criteria passed", 11 - s.failed);
    if s.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
