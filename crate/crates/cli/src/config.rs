//! Run configuration file. Every key has a default; command-line flags win.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dit_core::detect::{AnchorPreset, FpnConfig, EVAL_SCORE_THR};
use dit_core::dvae::DvaeConfig;
use dit_core::vit::VitConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub task: TaskConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus directory with `annotations.json`.
    pub dir: Option<PathBuf>,
    pub n: usize,
    pub width: usize,
    pub height: usize,
    /// Encoder input side; the tokenizer sees half of it.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: None, n: 64, width: 224, height: 224, image_size: 224, seed: 0 }
    }
}

/// A preset name or a full config object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Choice<T> {
    Preset(String),
    Custom(T),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vit: Choice<VitConfig>,
    pub dvae: Choice<DvaeConfig>,
    pub fpn: FpnConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vit: Choice::Preset("tiny".into()),
            dvae: Choice::Preset("tiny".into()),
            fpn: FpnConfig { channels: 32, inner_norm: true },
        }
    }
}

impl ModelConfig {
    pub fn vit(&self) -> anyhow::Result<VitConfig> {
        match &self.vit {
            Choice::Custom(c) => Ok(c.clone()),
            Choice::Preset(name) => match VitConfig::preset(name) {
                Some(c) => Ok(c),
                None => bail!("unknown model.vit preset {name:?} (tiny, base, large)"),
            },
        }
    }

    pub fn dvae(&self) -> anyhow::Result<DvaeConfig> {
        match &self.dvae {
            Choice::Custom(c) => Ok(c.clone()),
            Choice::Preset(name) => match name.as_str() {
                "tiny" => Ok(DvaeConfig::tiny()),
                "full" => Ok(DvaeConfig::full()),
                _ => bail!("unknown model.dvae preset {name:?} (tiny, full)"),
            },
        }
    }
}

/// Unset values fall back to each command's own defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: Option<f32>,
    pub weight_decay: Option<f32>,
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: Option<u64>,
    pub epochs: Option<usize>,
    /// Warmup steps, or epochs for classification.
    pub warmup: Option<u64>,
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub seed: u64,
    pub mask_ratio: f64,
    pub min_block: usize,
    pub lambda: f32,
    pub num_classes: usize,
    pub anchors: AnchorPreset,
    pub binarize: bool,
    pub categories: Vec<u32>,
    pub short_sides: Vec<usize>,
    pub neg_ratio: usize,
    pub score_thr: f32,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mask_ratio: 0.4,
            min_block: 16,
            lambda: dit_core::dvae::DEFAULT_LAMBDA,
            num_classes: 16,
            anchors: AnchorPreset::Layout,
            binarize: false,
            categories: vec![1, 2, 3, 4, 5],
            short_sides: Vec::new(),
            neg_ratio: 3,
            score_thr: EVAL_SCORE_THR,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", path.display()))
    }
}
