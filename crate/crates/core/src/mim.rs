//! Masked image modeling: blockwise masks, the token-prediction head and the
//! pre-training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dit_nn::layers::Linear;
use dit_nn::{checkpoint, AdamW, AdamWConfig, Graph, LrSchedule, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dvae::{shuffle, Dvae, DOWNSAMPLE};
use crate::error::{CoreError, Result};
use crate::imaging::{random_resized_crop, resize, Image, DEFAULT_CROP_AREA, DEFAULT_CROP_ASPECT};
use crate::vit::{preprocess, stack_patches, Vit, VitConfig, INIT_STD};

/// Largest single block, as a fraction of the grid.
pub const MAX_BLOCK_FRACTION: f64 = 0.25;
const MAX_ATTEMPTS: usize = 1000;

/// Largest number of patches one sampled block may cover.
pub fn max_block_area(n: usize) -> usize {
    ((MAX_BLOCK_FRACTION * n as f64).floor() as usize).max(1)
}

/// Unions random rectangles (area >= `min_block` patches, aspect in
/// `[0.3, 1/0.3]`, at most a quarter of the grid) until at least
/// `ceil(ratio * N)` positions are masked.
pub fn blockwise_mask<R: Rng + ?Sized>(rng: &mut R, grid_h: usize, grid_w: usize, ratio: f64, min_block: usize) -> Result<Vec<bool>> {
    let n = grid_h * grid_w;
    if n == 0 || !(ratio > 0.0 && ratio < 1.0) || ratio * (n as f64) < 1.0 - 1e-9 || min_block == 0 {
        return Err(CoreError::invalid(
            "blockwise_mask",
            format!("ratio {ratio} min_block {min_block} on a {grid_h}x{grid_w} grid"),
        ));
    }
    let target = ((ratio * n as f64) - 1e-9).ceil() as usize;
    let cap = max_block_area(n);
    let min_area = min_block.min(cap);
    let (log_lo, log_hi) = (0.3f64.ln(), (1.0 / 0.3f64).ln());
    let mut mask = vec![false; n];
    let mut count = 0;
    let mut idle = 0;
    while count < target && idle < MAX_ATTEMPTS {
        let area = rng.random_range(min_area as f64..=cap as f64);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let mut h = ((area * aspect).sqrt().round() as usize).clamp(1, grid_h);
        let mut w = ((area / aspect).sqrt().round() as usize).clamp(1, grid_w);
        while h * w > cap {
            if h >= w {
                h -= 1;
            } else {
                w -= 1;
            }
        }
        if h * w < min_area {
            idle += 1;
            continue;
        }
        let top = rng.random_range(0..=grid_h - h);
        let left = rng.random_range(0..=grid_w - w);
        let mut added = 0;
        for y in top..top + h {
            for x in left..left + w {
                let cell = &mut mask[y * grid_w + x];
                added += usize::from(!*cell);
                *cell = true;
            }
        }
        count += added;
        idle = if added == 0 { idle + 1 } else { 0 };
    }
    // Pathological grids only: top up with single cells.
    while count < target {
        let free: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
        mask[free[rng.random_range(0..free.len())]] = true;
        count += 1;
    }
    Ok(mask)
}

/// Linear map from encoder states to codebook logits.
#[derive(Clone, Debug)]
pub struct MimHead {
    pub linear: Linear,
}

impl MimHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, codebook: usize, rng: &mut R) -> Self {
        // small init keeps the starting loss at ln K
        Self { linear: Linear::new(store, "mim_head", hidden, codebook, INIT_STD * 0.1, rng) }
    }

    pub fn forward(&self, g: &mut Graph, states: Var) -> Result<Var> {
        Ok(self.linear.forward(g, states)?)
    }
}

/// Mean cross-entropy over masked positions.
pub fn mim_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    Ok(g.cross_entropy(logits, targets)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub min_block: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f32,
    pub warmup_steps: u64,
    pub weight_decay: f32,
    pub image_size: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.4,
            min_block: 16,
            steps: 500_000,
            batch_size: 2048,
            peak_lr: 1e-3,
            warmup_steps: 10_000,
            weight_decay: 0.05,
            image_size: 224,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

/// Encoder and prediction head sharing one parameter store.
pub struct MimModel {
    pub store: ParamStore,
    pub vit: Vit,
    pub head: MimHead,
}

impl MimModel {
    pub fn new(config: VitConfig, codebook: usize, seed: u64) -> Result<Self> {
        let mut rng = dit_nn::seeded_rng(seed);
        let mut store = ParamStore::new();
        let vit = Vit::new(&mut store, config, &mut rng)?;
        let head = MimHead::new(&mut store, vit.config.hidden, codebook, &mut rng);
        Ok(Self { store, vit, head })
    }

    /// Masked-token loss for one batch. `patches` is `[B, N, D]`, `mask` is
    /// `[B*N]`, `targets` holds one token per masked position in row-major order.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        patches: Var,
        grid: (usize, usize),
        mask: &[bool],
        targets: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let emb = self.vit.embed(g, patches, grid.0, grid.1)?;
        let pos = self.vit.positions(g, grid.0, grid.1)?;
        let x = self.vit.apply_mask(g, emb, mask, pos)?;
        let out = self.vit.encode(g, x, &[], training, rng)?;
        let s = g.shape(out.last).to_vec();
        let flat = g.reshape(out.last, &[s[0] * s[1], s[2]])?;
        let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(CoreError::invalid("mim_loss", format!("{} masked rows, {} targets", rows.len(), targets.len())));
        }
        let picked = g.gather_rows(flat, &rows)?;
        let logits = self.head.forward(g, picked)?;
        mim_loss(g, logits, targets)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f32,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub log: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl PretrainReport {
    /// Mean of the last `window` losses.
    pub fn smoothed_final_loss(&self, window: usize) -> Option<f64> {
        let n = self.log.len();
        if n == 0 {
            return None;
        }
        let tail = &self.log[n.saturating_sub(window.max(1))..];
        Some(tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
    }
}

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "backbone.ditc";

/// Writes weights atomically plus the encoder config alongside.
pub fn save_checkpoint(store: &ParamStore, config: &VitConfig, path: &Path) -> Result<()> {
    checkpoint::save(path, &store.named_tensors())?;
    fs::write(crate::dvae::config_path(path), serde_json::to_vec_pretty(config)?)?;
    Ok(())
}

/// Encoder config stored next to a checkpoint by [`save_checkpoint`].
pub fn read_backbone_config(path: &Path) -> Result<VitConfig> {
    Ok(serde_json::from_slice(&fs::read(crate::dvae::config_path(path))?)?)
}

/// One training sample: encoder patches and tokenizer targets from the same crop.
struct Sample {
    patches: crate::imaging::PatchSequence,
    tokens: Vec<usize>,
}

fn make_samples<R: Rng + ?Sized>(
    images: &[&Image],
    tokenizer: &Dvae,
    cfg: &PretrainConfig,
    patch: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let mut crops = Vec::with_capacity(images.len());
    let mut small = Vec::with_capacity(images.len());
    for img in images {
        let crop = random_resized_crop(img, rng, DEFAULT_CROP_AREA, DEFAULT_CROP_ASPECT, cfg.image_size)?;
        small.push(resize(&crop, cfg.image_size / 2, cfg.image_size / 2)?);
        crops.push(crop);
    }
    let refs: Vec<&Image> = small.iter().collect();
    let tokens = tokenizer.tokenize_batch(&refs)?;
    crops
        .iter()
        .zip(tokens)
        .map(|(crop, t)| {
            let patches = preprocess(crop, cfg.image_size, patch)?;
            if (t.grid_h, t.grid_w) != (patches.grid_h, patches.grid_w) {
                return Err(CoreError::invalid(
                    "pretrain",
                    format!(
                        "token grid {}x{} does not match patch grid {}x{}",
                        t.grid_h, t.grid_w, patches.grid_h, patches.grid_w
                    ),
                ));
            }
            Ok(Sample { patches, tokens: t.indices })
        })
        .collect()
}

/// Runs masked image modeling. When `out_dir` is given, appends `step,lr,loss`
/// rows to `loss.csv` and writes checkpoints there.
pub fn pretrain(
    model: &mut MimModel,
    corpus: &[Image],
    tokenizer: &Dvae,
    cfg: &PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(CoreError::invalid("pretrain", "empty corpus"));
    }
    if !tokenizer.is_loaded() {
        return Err(CoreError::NotLoaded { what: "tokenizer" });
    }
    let patch = model.vit.config.patch_size;
    if cfg.image_size % patch != 0 || (cfg.image_size / 2) % DOWNSAMPLE != 0 {
        return Err(CoreError::invalid("pretrain", format!("image size {} incompatible with patch {patch}", cfg.image_size)));
    }
    let (gh, gw) = (cfg.image_size / patch, cfg.image_size / patch);
    if (cfg.image_size / 2 / DOWNSAMPLE) != gh {
        return Err(CoreError::invalid(
            "pretrain",
            format!("tokenizer grid {0}x{0} does not match patch grid {gh}x{gw}", cfg.image_size / 2 / DOWNSAMPLE),
        ));
    }
    let schedule = LrSchedule::new(cfg.peak_lr, cfg.warmup_steps, cfg.steps)?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut rng = dit_nn::seeded_rng(cfg.seed);
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(LOSS_LOG);
            let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
            if f.metadata()?.len() == 0 {
                writeln!(f, "step,lr,loss")?;
            }
            Some(f)
        }
        None => None,
    };
    let mut report = PretrainReport { log: Vec::new(), checkpoints: Vec::new() };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..corpus.len()).collect();
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            batch.push(&corpus[order[cursor]]);
            cursor += 1;
        }
        let samples = make_samples(&batch, tokenizer, cfg, patch, &mut rng)?;
        let mut mask = Vec::with_capacity(samples.len() * gh * gw);
        let mut targets = Vec::new();
        for s in &samples {
            let m = blockwise_mask(&mut rng, gh, gw, cfg.mask_ratio, cfg.min_block)?;
            targets.extend(m.iter().zip(&s.tokens).filter(|(&b, _)| b).map(|(_, &t)| t));
            mask.extend(m);
        }
        let seqs: Vec<_> = samples.into_iter().map(|s| s.patches).collect();
        let input = stack_patches(&seqs)?;
        let lr = schedule.lr_at(step)?;
        let (loss, grads) = {
            let mut g = Graph::with_params(&model.store);
            let x = g.input(input);
            let l = model.loss(&mut g, x, (gh, gw), &mask, &targets, true, &mut rng)?;
            let loss = g.scalar_f64(l)?;
            if !loss.is_finite() {
                return Err(dit_nn::NnError::NonFinite("mim loss").into());
            }
            (loss, g.backward(l)?)
        };
        model.store.zero_grad();
        grads.accumulate(&mut model.store);
        opt.step(&mut model.store, lr);
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{step},{lr:e},{loss:e}")?;
        }
        log::debug!("mim step {step} lr {lr:.3e} loss {loss:.4}");
        report.log.push(LossRecord { step, lr, loss });
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                let path = dir.join(format!("checkpoint-{step:06}.ditc"));
                save_checkpoint(&model.store, &model.vit.config, &path)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        save_checkpoint(&model.store, &model.vit.config, &path)?;
        report.checkpoints.push(path);
    }
    Ok(report)
}

/// Uniform-logit loss for `k` codes: `ln k`.
pub fn uniform_loss(k: usize) -> f64 {
    (k as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_count_for_default_grid() {
        let mut rng = dit_nn::seeded_rng(0);
        let m = blockwise_mask(&mut rng, 14, 14, 0.4, 16).unwrap();
        let c = m.iter().filter(|&&b| b).count();
        assert!((79..79 + max_block_area(196)).contains(&c), "{c}");
    }

    #[test]
    fn tiny_ratio_masks_at_least_one() {
        let mut rng = dit_nn::seeded_rng(1);
        let m = blockwise_mask(&mut rng, 14, 14, 1.0 / 196.0, 16).unwrap();
        assert!(m.iter().any(|&b| b));
    }

    #[test]
    fn rejects_degenerate_ratio() {
        let mut rng = dit_nn::seeded_rng(1);
        assert!(blockwise_mask(&mut rng, 14, 14, 0.0, 16).is_err());
        assert!(blockwise_mask(&mut rng, 2, 2, 0.1, 1).is_err());
    }
}
