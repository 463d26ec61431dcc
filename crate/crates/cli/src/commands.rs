use std::collections::BTreeSet;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dit_core::classify::{train_classifier, Classifier, ClassifierConfig, ClsTrainConfig};
use dit_core::coco::{read_predictions, write_predictions, AnnotationFile, Detection};
use dit_core::detect::{
    predict_corpus, train_detector, AnchorConfig, AnchorPreset, DetTrainConfig, Detector,
    DetectorConfig, DEFAULT_SCORE_THR,
};
use dit_core::dvae::{Dvae, DvaeTrainConfig};
use dit_core::imaging::{load_image, resize, Image};
use dit_core::metrics::{accuracy, map_range, match_detections, prf1, weighted_f1_from_detections, WF1_THRESHOLDS};
use dit_core::mim::{pretrain, read_backbone_config, LossRecord, MimModel, PretrainConfig};
use dit_core::synthdoc::{generate_corpus, Category, CorpusItem, CorpusSpec, LayoutElement, ANNOTATION_FILE};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::{rundir, AnchorsArg, Cli, Command, Task, TrainOpts};

/// A checkpoint named on the command line does not exist (exit code 2).
#[derive(Debug)]
pub struct MissingCheckpoint(pub PathBuf);

impl fmt::Display for MissingCheckpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "checkpoint {} not found", self.0.display())
    }
}

impl std::error::Error for MissingCheckpoint {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<MissingCheckpoint>()) {
        2
    } else {
        1
    }
}

fn require_checkpoint(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(MissingCheckpoint(path.to_owned()).into())
    }
}

/// Checkpoints saved with a config sidecar need both files.
fn require_with_config(path: &Path) -> anyhow::Result<()> {
    require_checkpoint(path)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    require_checkpoint(Path::new(&side))
}

struct Ctx {
    cfg: RunConfig,
    workers: usize,
    run_dir: Option<PathBuf>,
}

impl Ctx {
    fn run_dir(&self, command: &str, extra: &serde_json::Value) -> anyhow::Result<PathBuf> {
        let resolved = json!({ "config": self.cfg, "command": extra });
        match &self.run_dir {
            Some(d) => {
                std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
                std::fs::write(d.join("config.json"), serde_json::to_vec_pretty(&resolved)?)?;
                Ok(d.clone())
            }
            None => rundir::create(command, &resolved),
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let mut ctx = Ctx { cfg, workers: cli.workers.max(1), run_dir: cli.run_dir };
    match cli.command {
        Command::SynthData(a) => synth_data(&mut ctx, a),
        Command::TrainTokenizer(a) => train_tokenizer(&mut ctx, a),
        Command::Pretrain(a) => pretrain_cmd(&mut ctx, a),
        Command::FinetuneClassify(a) => finetune_classify(&mut ctx, a),
        Command::FinetuneDetect(a) => finetune_detect(&mut ctx, a),
        Command::Evaluate(a) => evaluate(&mut ctx, a),
        Command::Reconstruct(a) => reconstruct(&mut ctx, a),
        Command::GradCheck(a) => grad_check(a),
    }
}

/// Applies the shared training flags to the config.
fn apply_common(cfg: &mut RunConfig, o: &TrainOpts) {
    if let Some(d) = &o.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(s) = o.seed {
        cfg.task.seed = s;
    }
    if let Some(v) = o.lr {
        cfg.optimizer.lr = Some(v);
    }
    if let Some(v) = o.batch_size {
        cfg.optimizer.batch_size = Some(v);
    }
    if let Some(v) = o.weight_decay {
        cfg.optimizer.weight_decay = Some(v);
    }
    if let Some(v) = o.image_size {
        cfg.data.image_size = v;
    }
}

/// Reads a corpus directory, decoding pages on `workers` threads.
pub fn load_corpus(dir: &Path, workers: usize) -> anyhow::Result<Vec<CorpusItem>> {
    let ann_path = dir.join(ANNOTATION_FILE);
    let ann = AnnotationFile::read(&ann_path).with_context(|| format!("reading {}", ann_path.display()))?;
    if ann.images.is_empty() {
        bail!("corpus {} has no images", dir.display());
    }
    let chunk = ann.images.len().div_ceil(workers.max(1));
    let pages: Vec<Image> = std::thread::scope(|s| {
        let handles: Vec<_> = ann
            .images
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|im| load_image(&dir.join(&im.file_name)).map(|i| i.to_gray()))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("image loader panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    Ok(ann
        .images
        .iter()
        .zip(pages)
        .map(|(im, image)| {
            let elements = ann
                .annotations_for(im.id)
                .filter_map(|a| Category::from_id(a.category_id).map(|category| LayoutElement { category, bbox: a.bbox }))
                .collect();
            CorpusItem { image_id: im.id, image, class_id: im.class_id as usize, elements }
        })
        .collect())
}

fn corpus(ctx: &Ctx) -> anyhow::Result<Vec<CorpusItem>> {
    let Some(dir) = ctx.cfg.data.dir.as_deref() else {
        bail!("no corpus given: pass --data or set data.dir");
    };
    load_corpus(dir, ctx.workers)
}

/// An explicit warmup is used as given; the default is capped at the step count.
fn warmup_or(c: &RunConfig, default: u64, default_steps: u64) -> u64 {
    let total = c.schedule.steps.or(c.schedule.epochs.map(|e| e as u64)).unwrap_or(default_steps);
    c.schedule.warmup.unwrap_or_else(|| default.min(total))
}

fn write_loss_csv(path: &Path, log: &[LossRecord]) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,lr,loss")?;
    for r in log {
        writeln!(f, "{},{:e},{}", r.step, r.lr, r.loss)?;
    }
    f.flush()?;
    Ok(())
}

fn synth_data(ctx: &mut Ctx, a: crate::SynthArgs) -> anyhow::Result<()> {
    let d = &mut ctx.cfg.data;
    if let Some(n) = a.n {
        d.n = n;
    }
    if let Some(s) = a.seed {
        d.seed = s;
    }
    if let Some(w) = a.width {
        d.width = w;
    }
    if let Some(h) = a.height {
        d.height = h;
    }
    let spec = match a.template {
        Some(t) => CorpusSpec::only(t, d.width, d.height),
        None => CorpusSpec { width: d.width, height: d.height, ..Default::default() },
    };
    if a.template.is_some_and(|t| t >= dit_core::synthdoc::NUM_TEMPLATES) {
        bail!("template must be below {}", dit_core::synthdoc::NUM_TEMPLATES);
    }
    let out = match a.out {
        Some(o) => o,
        None => ctx.run_dir("synth-data", &json!({ "template": a.template }))?.join("data"),
    };
    let manifest = generate_corpus(ctx.cfg.data.n, ctx.cfg.data.seed, &out, &spec)?;
    let elements: usize = manifest.iter().map(|m| m.elements).sum();
    println!("wrote {} pages and {elements} annotations to {}", manifest.len(), out.display());
    Ok(())
}

fn train_tokenizer(ctx: &mut Ctx, a: crate::TokenizerArgs) -> anyhow::Result<()> {
    apply_common(&mut ctx.cfg, &a.common);
    if let Some(e) = a.epochs {
        ctx.cfg.schedule.epochs = Some(e);
    }
    let items = corpus(ctx)?;
    let side = ctx.cfg.data.image_size / 2;
    let images: Vec<Image> = items.iter().map(|it| resize(&it.image, side, side)).collect::<Result<_, _>>()?;
    let defaults = DvaeTrainConfig::default();
    let tc = DvaeTrainConfig {
        epochs: ctx.cfg.schedule.epochs.unwrap_or(defaults.epochs),
        batch_size: ctx.cfg.optimizer.batch_size.unwrap_or(defaults.batch_size),
        lr: ctx.cfg.optimizer.lr.unwrap_or(defaults.lr),
        lambda: ctx.cfg.task.lambda,
        seed: ctx.cfg.task.seed,
    };
    let dir = ctx.run_dir("train-tokenizer", &json!({ "train": tc.epochs }))?;
    let mut model = Dvae::new(ctx.cfg.model.dvae()?, ctx.cfg.task.seed)?;
    let history = model.train(&images, &tc)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("tokenizer_log.csv"))?);
    writeln!(f, "epoch,mse,perplexity_loss,temperature")?;
    for e in &history {
        writeln!(f, "{},{},{},{}", e.epoch, e.mse, e.perplexity_loss, e.temperature)?;
    }
    f.flush()?;
    let path = dir.join("tokenizer.ditc");
    model.save(&path)?;
    let last = history.last();
    println!(
        "tokenizer saved to {} (mse {:.4}, perplexity_loss {:.3})",
        path.display(),
        last.map_or(f64::NAN, |e| e.mse),
        last.map_or(f64::NAN, |e| e.perplexity_loss)
    );
    Ok(())
}

fn pretrain_cmd(ctx: &mut Ctx, a: crate::PretrainArgs) -> anyhow::Result<()> {
    apply_common(&mut ctx.cfg, &a.common);
    if let Some(s) = a.steps {
        ctx.cfg.schedule.steps = Some(s);
    }
    if let Some(w) = a.warmup {
        ctx.cfg.schedule.warmup = Some(w);
    }
    if let Some(c) = a.checkpoint_every {
        ctx.cfg.schedule.checkpoint_every = c;
    }
    if let Some(r) = a.mask_ratio {
        ctx.cfg.task.mask_ratio = r;
    }
    require_with_config(&a.tokenizer)?;
    let tokenizer = Dvae::load(&a.tokenizer)?;
    let items = corpus(ctx)?;
    let images: Vec<Image> = items.into_iter().map(|it| it.image).collect();
    let d = PretrainConfig::default();
    let c = &ctx.cfg;
    let pc = PretrainConfig {
        mask_ratio: c.task.mask_ratio,
        min_block: c.task.min_block,
        steps: c.schedule.steps.unwrap_or(d.steps),
        batch_size: c.optimizer.batch_size.unwrap_or(d.batch_size),
        peak_lr: c.optimizer.lr.unwrap_or(d.peak_lr),
        warmup_steps: warmup_or(c, d.warmup_steps, d.steps),
        weight_decay: c.optimizer.weight_decay.unwrap_or(d.weight_decay),
        image_size: c.data.image_size,
        checkpoint_every: c.schedule.checkpoint_every,
        seed: c.task.seed,
    };
    let dir = ctx.run_dir("pretrain", &json!({ "pretrain": pc, "tokenizer": a.tokenizer }))?;
    let mut model = MimModel::new(ctx.cfg.model.vit()?, tokenizer.config.codebook_size, pc.seed)?;
    let report = pretrain(&mut model, &images, &tokenizer, &pc, Some(&dir))?;
    println!(
        "pre-trained {} steps, smoothed final loss {:.4}; artifacts in {}",
        report.log.len(),
        report.smoothed_final_loss(20).unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

fn backbone_config(ctx: &Ctx, backbone: Option<&Path>) -> anyhow::Result<dit_core::vit::VitConfig> {
    match backbone {
        Some(p) => {
            require_with_config(p)?;
            Ok(read_backbone_config(p)?)
        }
        None => ctx.cfg.model.vit(),
    }
}

fn finetune_classify(ctx: &mut Ctx, a: crate::ClassifyArgs) -> anyhow::Result<()> {
    apply_common(&mut ctx.cfg, &a.common);
    if let Some(e) = a.epochs {
        ctx.cfg.schedule.epochs = Some(e);
    }
    if let Some(w) = a.warmup {
        ctx.cfg.schedule.warmup = Some(w);
    }
    if let Some(k) = a.num_classes {
        ctx.cfg.task.num_classes = k;
    }
    let vit = backbone_config(ctx, a.backbone.as_deref())?;
    let items = corpus(ctx)?;
    let d = ClsTrainConfig::default();
    let c = &ctx.cfg;
    let tc = ClsTrainConfig {
        epochs: c.schedule.epochs.unwrap_or(d.epochs),
        batch_size: c.optimizer.batch_size.unwrap_or(d.batch_size),
        peak_lr: c.optimizer.lr.unwrap_or(d.peak_lr),
        warmup_epochs: warmup_or(c, d.warmup_epochs as u64, d.epochs as u64) as usize,
        weight_decay: c.optimizer.weight_decay.unwrap_or(d.weight_decay),
        seed: c.task.seed,
    };
    let mc = ClassifierConfig { vit, num_classes: c.task.num_classes, image_size: c.data.image_size };
    let dir = ctx.run_dir("finetune-classify", &json!({ "train": tc, "model": mc, "backbone": a.backbone }))?;
    let mut model = Classifier::new(mc, tc.seed)?;
    if let Some(p) = &a.backbone {
        model.load_backbone(p)?;
    }
    let images: Vec<Image> = items.iter().map(|it| it.image.clone()).collect();
    let labels: Vec<usize> = items.iter().map(|it| it.class_id).collect();
    let log = train_classifier(&mut model, &images, &labels, &tc)?;
    write_loss_csv(&dir.join("loss.csv"), &log)?;
    let path = dir.join("classifier.ditc");
    model.save(&path)?;
    println!("classifier saved to {} after {} steps", path.display(), log.len());
    Ok(())
}

fn finetune_detect(ctx: &mut Ctx, a: crate::DetectArgs) -> anyhow::Result<()> {
    apply_common(&mut ctx.cfg, &a.common);
    if let Some(s) = a.steps {
        ctx.cfg.schedule.steps = Some(s);
    }
    if let Some(w) = a.warmup {
        ctx.cfg.schedule.warmup = Some(w);
    }
    if let Some(p) = a.anchors {
        ctx.cfg.task.anchors = match p {
            AnchorsArg::Layout => AnchorPreset::Layout,
            AnchorsArg::Text => AnchorPreset::Text,
        };
    }
    if a.binarize {
        ctx.cfg.task.binarize = true;
    }
    if let Some(cats) = a.categories {
        ctx.cfg.task.categories = cats;
    }
    if ctx.cfg.task.categories.is_empty() || ctx.cfg.task.categories.iter().any(|&c| Category::from_id(c).is_none()) {
        bail!("categories {:?} must be non-empty ids in 1..=6", ctx.cfg.task.categories);
    }
    let vit = backbone_config(ctx, a.backbone.as_deref())?;
    let items = corpus(ctx)?;
    let d = DetTrainConfig::default();
    let c = &ctx.cfg;
    let tc = DetTrainConfig {
        steps: c.schedule.steps.unwrap_or(d.steps),
        batch_size: c.optimizer.batch_size.unwrap_or(d.batch_size),
        peak_lr: c.optimizer.lr.unwrap_or(d.peak_lr),
        warmup_steps: warmup_or(c, d.warmup_steps, d.steps),
        weight_decay: c.optimizer.weight_decay.unwrap_or(d.weight_decay),
        short_sides: c.task.short_sides.clone(),
        max_side: d.max_side,
        neg_ratio: c.task.neg_ratio,
        seed: c.task.seed,
    };
    let mc = DetectorConfig {
        vit,
        fpn: c.model.fpn.clone(),
        anchors: AnchorConfig::preset(c.task.anchors),
        categories: c.task.categories.clone(),
        binarize: c.task.binarize,
    };
    let dir = ctx.run_dir("finetune-detect", &json!({ "train": tc, "model": mc, "backbone": a.backbone }))?;
    let mut det = Detector::new(mc, tc.seed)?;
    if let Some(p) = &a.backbone {
        det.load_backbone(p)?;
    }
    let log = train_detector(&mut det, &items, &tc)?;
    write_loss_csv(&dir.join("loss.csv"), &log)?;
    let path = dir.join("detector.ditc");
    det.save(&path)?;
    println!("detector saved to {} after {} steps", path.display(), log.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelPrediction {
    image_id: u64,
    label: usize,
}

fn pct(v: f64) -> f64 {
    v * 100.0
}

fn detections_for(ctx: &Ctx, a: &crate::EvaluateArgs, dir: &Path, score_thr: f32) -> anyhow::Result<Vec<Detection>> {
    if let Some(p) = &a.preds {
        return Ok(read_predictions(p).with_context(|| format!("reading predictions {}", p.display()))?);
    }
    let Some(ck) = &a.checkpoint else {
        bail!("pass --preds or --checkpoint with --data");
    };
    require_with_config(ck)?;
    let det = Detector::load(ck)?;
    let items = corpus(ctx)?;
    let preds = predict_corpus(&det, &items, score_thr)?;
    write_predictions(&dir.join("predictions.json"), &preds)?;
    Ok(preds)
}

fn ground_truth(ctx: &Ctx, a: &crate::EvaluateArgs) -> anyhow::Result<AnnotationFile> {
    let path = match (&a.gts, &ctx.cfg.data.dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join(ANNOTATION_FILE),
        (None, None) => bail!("pass --gts or --data"),
    };
    AnnotationFile::read(&path).with_context(|| format!("reading ground truth {}", path.display()))
}

fn evaluate(ctx: &mut Ctx, a: crate::EvaluateArgs) -> anyhow::Result<()> {
    if let Some(d) = &a.data {
        ctx.cfg.data.dir = Some(d.clone());
    }
    if let Some(t) = a.score_thr {
        ctx.cfg.task.score_thr = t;
    }
    if let Some(ck) = &a.checkpoint {
        require_checkpoint(ck)?;
    }
    let dir = ctx.run_dir("evaluate", &json!({ "task": format!("{:?}", a.task), "iou": a.iou }))?;
    let thr = ctx.cfg.task.score_thr;
    let report = match a.task {
        Task::Wf1 | Task::Prf1 => {
            let gts = ground_truth(ctx, &a)?.annotations;
            let preds: Vec<Detection> = detections_for(ctx, &a, &dir, thr)?.into_iter().filter(|d| d.score >= thr).collect();
            if a.task == Task::Wf1 {
                let (f1, w) = weighted_f1_from_detections(&preds, &gts)?;
                println!("wf1 {:.2}", pct(w));
                let mut r = serde_json::Map::new();
                for (t, v) in WF1_THRESHOLDS.iter().zip(f1) {
                    r.insert(format!("f1@{t}"), json!(pct(v)));
                }
                r.insert("wf1".into(), json!(pct(w)));
                r.insert("score_thr".into(), json!(thr));
                serde_json::Value::Object(r)
            } else {
                let m = match_detections(&preds, &gts, a.iou);
                let s = prf1(m.tp, m.fp, m.fn_);
                println!("precision {:.2} recall {:.2} f1 {:.2}", pct(s.precision), pct(s.recall), pct(s.f1));
                json!({
                    "iou": a.iou, "score_thr": thr, "tp": m.tp, "fp": m.fp, "fn": m.fn_,
                    "precision": pct(s.precision), "recall": pct(s.recall), "f1": pct(s.f1),
                })
            }
        }
        Task::Map => {
            let ann = ground_truth(ctx, &a)?;
            let preds = detections_for(ctx, &a, &dir, a.score_thr.unwrap_or(DEFAULT_SCORE_THR))?;
            let mut cats: Vec<u32> = ann.categories.iter().map(|c| c.id).collect();
            if cats.is_empty() {
                cats = ann.annotations.iter().map(|g| g.category_id).collect::<BTreeSet<_>>().into_iter().collect();
            }
            let r = map_range(&preds, &ann.annotations, &cats);
            println!("mAP@[0.50:0.95] {:.2}", pct(r.overall));
            let per: Vec<_> = r
                .categories
                .iter()
                .map(|c| json!({ "category_id": c.category_id, "map": c.map.map(pct), "ap": c.ap.map(|v| v.map(pct)) }))
                .collect();
            json!({ "map": pct(r.overall), "categories": per })
        }
        Task::Accuracy => {
            let ann = ground_truth(ctx, &a)?;
            let truth: std::collections::BTreeMap<u64, usize> = ann.images.iter().map(|im| (im.id, im.class_id as usize)).collect();
            let labels: Vec<LabelPrediction> = match (&a.preds, &a.checkpoint) {
                (Some(p), _) => serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)?,
                (None, Some(ck)) => {
                    require_with_config(ck)?;
                    let model = Classifier::load(ck)?;
                    let items = corpus(ctx)?;
                    let refs: Vec<&Image> = items.iter().map(|it| &it.image).collect();
                    let pred = model.predict(&refs)?;
                    let out: Vec<LabelPrediction> =
                        items.iter().zip(pred).map(|(it, label)| LabelPrediction { image_id: it.image_id, label }).collect();
                    std::fs::write(dir.join("predictions.json"), serde_json::to_vec_pretty(&out)?)?;
                    out
                }
                (None, None) => bail!("pass --preds or --checkpoint with --data"),
            };
            let mut p = Vec::with_capacity(labels.len());
            let mut t = Vec::with_capacity(labels.len());
            for l in &labels {
                let Some(&gt) = truth.get(&l.image_id) else {
                    bail!("prediction for unknown image {}", l.image_id);
                };
                p.push(l.label);
                t.push(gt);
            }
            let acc = accuracy(&p, &t)?;
            println!("accuracy {:.2}", pct(acc));
            json!({ "accuracy": pct(acc), "n": p.len() })
        }
    };
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
    log::info!("report written to {}", path.display());
    Ok(())
}

fn reconstruct(ctx: &mut Ctx, a: crate::ReconstructArgs) -> anyhow::Result<()> {
    require_with_config(&a.tokenizer)?;
    if a.size == 0 || a.size % dit_core::dvae::DOWNSAMPLE != 0 {
        bail!("--size must be a positive multiple of {}", dit_core::dvae::DOWNSAMPLE);
    }
    let tok = Dvae::load(&a.tokenizer)?;
    let page = load_image(&a.image).with_context(|| format!("reading {}", a.image.display()))?.to_gray();
    let src = resize(&page, a.size, a.size)?;
    let rec = tok.reconstruct(&src)?;
    let s = a.size;
    let mut pair = Image::filled(2 * s, s, 1, 255.0);
    for y in 0..s {
        pair.data[y * 2 * s..y * 2 * s + s].copy_from_slice(&src.data[y * s..(y + 1) * s]);
        pair.data[y * 2 * s + s..(y + 1) * 2 * s].copy_from_slice(&rec.data[y * s..(y + 1) * s]);
    }
    let mse = src.data.iter().zip(&rec.data).map(|(a, b)| ((a - b) / 255.0).powi(2) as f64).sum::<f64>() / (s * s) as f64;
    let out = match a.out {
        Some(o) => o,
        None => ctx.run_dir("reconstruct", &json!({ "image": a.image, "tokenizer": a.tokenizer }))?.join("reconstruction.png"),
    };
    pair.save_png(&out)?;
    println!("wrote {} (pixel mse {mse:.5} on [0, 1] scale)", out.display());
    Ok(())
}

fn grad_check(a: crate::GradCheckArgs) -> anyhow::Result<()> {
    let seeds = a.seeds.unwrap_or_else(|| vec![0, 1, 2]);
    let mut failures = 0;
    println!("{:<24} {:>6} {:>12} {:>10}  result", "op", "seed", "max error", "tolerance");
    for seed in seeds {
        for c in dit_nn::gradcheck::op_suite(seed)? {
            let ok = c.passed();
            failures += usize::from(!ok);
            println!(
                "{:<24} {:>6} {:>12.3e} {:>10.0e}  {}",
                c.name,
                seed,
                c.max_error,
                c.tolerance,
                if ok { "PASS" } else { "FAIL" }
            );
        }
    }
    if failures > 0 {
        bail!("{failures} gradient checks failed");
    }
    Ok(())
}
