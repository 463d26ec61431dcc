//! Whole-page classification: encoder, mean pooling and a linear head.

use std::path::Path;

use dit_nn::{checkpoint, AdamW, AdamWConfig, Graph, LrSchedule, ParamStore};
use serde::{Deserialize, Serialize};

use crate::dvae::{config_path, shuffle};
use crate::error::{CoreError, Result};
use crate::imaging::Image;
use crate::mim::LossRecord;
use crate::vit::{preprocess, stack_patches, ClassHead, Vit, VitConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub vit: VitConfig,
    pub num_classes: usize,
    /// Square input side; pages are resized to it.
    pub image_size: usize,
}

pub struct Classifier {
    pub config: ClassifierConfig,
    pub store: ParamStore,
    pub vit: Vit,
    pub head: ClassHead,
    loaded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f32,
    pub warmup_epochs: usize,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for ClsTrainConfig {
    fn default() -> Self {
        Self { epochs: 90, batch_size: 128, peak_lr: 1e-3, warmup_epochs: 20, weight_decay: 0.05, seed: 0 }
    }
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(CoreError::invalid("classifier", format!("{} classes", config.num_classes)));
        }
        if config.image_size == 0 || config.image_size % config.vit.patch_size != 0 {
            return Err(CoreError::invalid(
                "classifier",
                format!("image size {} not a multiple of patch {}", config.image_size, config.vit.patch_size),
            ));
        }
        let mut rng = dit_nn::seeded_rng(seed);
        let mut store = ParamStore::new();
        let vit = Vit::new(&mut store, config.vit.clone(), &mut rng)?;
        let head = ClassHead::new(&mut store, config.vit.hidden, config.num_classes, &mut rng);
        Ok(Self { config, store, vit, head, loaded: false })
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded
    }

    pub fn mark_loaded(&mut self) {
        self.loaded = true;
    }

    /// Copies `vit/` weights from a pre-training checkpoint.
    pub fn load_backbone(&mut self, path: &Path) -> Result<()> {
        let tensors: Vec<_> = checkpoint::load(path)?.into_iter().filter(|(n, _)| n.starts_with("vit/")).collect();
        let n = self.store.load_tensors(&tensors)?;
        let expected = self.store.iter().filter(|(_, p)| p.name.starts_with("vit/")).count();
        if n != expected {
            return Err(CoreError::invalid("load_backbone", format!("{n} of {expected} encoder tensors in {}", path.display())));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)?;
        std::fs::write(config_path(path), serde_json::to_vec_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: ClassifierConfig = serde_json::from_slice(&std::fs::read(config_path(path))?)?;
        let mut model = Self::new(config, 0)?;
        model.store.load_strict(path)?;
        model.loaded = true;
        Ok(model)
    }

    fn batch_input(&self, images: &[&Image]) -> Result<(dit_nn::Tensor, (usize, usize))> {
        let seqs = images
            .iter()
            .map(|img| {
                let gray = if img.channels == self.config.vit.in_channels { (*img).clone() } else { img.to_gray() };
                preprocess(&gray, self.config.image_size, self.config.vit.patch_size)
            })
            .collect::<Result<Vec<_>>>()?;
        let grid = (seqs[0].grid_h, seqs[0].grid_w);
        Ok((stack_patches(&seqs)?, grid))
    }

    /// `[B, C]` logits values for a batch.
    pub fn logits(&self, images: &[&Image]) -> Result<dit_nn::Tensor> {
        if images.is_empty() {
            return Err(CoreError::invalid("classify", "empty batch"));
        }
        let (input, grid) = self.batch_input(images)?;
        let mut g = Graph::inference(&self.store);
        let x = g.input(input);
        let emb = self.vit.embed(&mut g, x, grid.0, grid.1)?;
        let mut rng = dit_nn::seeded_rng(0);
        let out = self.vit.encode(&mut g, emb, &[], false, &mut rng)?;
        let l = self.head.forward(&mut g, out.last)?;
        Ok(g.value(l).clone())
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        if !self.loaded {
            return Err(CoreError::NotLoaded { what: "classifier" });
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            out.extend(self.logits(chunk)?.argmax_rows());
        }
        Ok(out)
    }
}

/// Cross-entropy fine-tuning with warmup-cosine steps over `epochs` passes.
pub fn train_classifier(model: &mut Classifier, images: &[Image], labels: &[usize], cfg: &ClsTrainConfig) -> Result<Vec<LossRecord>> {
    if images.is_empty() || images.len() != labels.len() || cfg.batch_size == 0 {
        return Err(CoreError::invalid("finetune_classify", format!("{} images, {} labels", images.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.config.num_classes) {
        return Err(CoreError::invalid("finetune_classify", format!("label {bad} >= {}", model.config.num_classes)));
    }
    let per_epoch = images.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let schedule = LrSchedule::new(cfg.peak_lr, per_epoch * cfg.warmup_epochs as u64, total)?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut rng = dit_nn::seeded_rng(cfg.seed);
    let mut log = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        shuffle(&mut order, &mut rng);
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (input, grid) = model.batch_input(&batch)?;
            let lr = schedule.lr_at(step)?;
            let (loss, grads) = {
                let mut g = Graph::with_params(&model.store);
                let x = g.input(input);
                let emb = model.vit.embed(&mut g, x, grid.0, grid.1)?;
                let out = model.vit.encode(&mut g, emb, &[], true, &mut rng)?;
                let logits = model.head.forward(&mut g, out.last)?;
                let l = g.cross_entropy(logits, &targets)?;
                let loss = g.scalar_f64(l)?;
                if !loss.is_finite() {
                    return Err(dit_nn::NnError::NonFinite("classification loss").into());
                }
                (loss, g.backward(l)?)
            };
            model.store.zero_grad();
            grads.accumulate(&mut model.store);
            opt.step(&mut model.store, lr);
            log::debug!("classify step {step} lr {lr:.3e} loss {loss:.4}");
            log.push(LossRecord { step, lr, loss });
        }
    }
    model.loaded = true;
    Ok(log)
}
