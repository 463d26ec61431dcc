//! `dit`: synthetic data, tokenizer and backbone training, fine-tuning and evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod rundir;

#[derive(Debug, Parser)]
#[command(name = "dit", version, about = "Masked-image pre-training and layout detection for document pages, at desk scale")]
pub struct Cli {
    /// JSON run config with sections data, model, optimizer, schedule, task.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Threads used for loading images.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Write artifacts here instead of a fresh directory under $DIT_DESK_DIR.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic document corpus with COCO annotations.
    SynthData(SynthArgs),
    /// Train the dVAE image tokenizer.
    TrainTokenizer(TokenizerArgs),
    /// Masked image modeling pre-training of the encoder.
    Pretrain(PretrainArgs),
    /// Fine-tune a page classifier.
    FinetuneClassify(ClassifyArgs),
    /// Fine-tune the FPN detector.
    FinetuneDetect(DetectArgs),
    /// Compute a metrics report.
    Evaluate(EvaluateArgs),
    /// Write an original/reconstruction pair through the tokenizer.
    Reconstruct(ReconstructArgs),
    /// Finite-difference check of every differentiable op.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: `<run dir>/data`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Render only this template.
    #[arg(long)]
    pub template: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    /// Corpus directory written by synth-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f32>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TokenizerArgs {
    #[command(flatten)]
    pub common: TrainOpts,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: TrainOpts,
    /// Tokenizer checkpoint from train-tokenizer.
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub common: TrainOpts,
    /// Pre-trained backbone checkpoint.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Warmup epochs.
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AnchorsArg {
    Layout,
    Text,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: TrainOpts,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub anchors: Option<AnchorsArg>,
    /// Adaptive binarization before the encoder.
    #[arg(long)]
    pub binarize: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Category ids to detect, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<u32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Wf1,
    Map,
    Prf1,
    Accuracy,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Predictions: COCO results array, or `[{"image_id", "label"}]` for accuracy.
    #[arg(long)]
    pub preds: Option<PathBuf>,
    /// Ground-truth annotations file.
    #[arg(long)]
    pub gts: Option<PathBuf>,
    /// Model checkpoint to run over --data instead of reading --preds.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Minimum score for wf1 and prf1.
    #[arg(long)]
    pub score_thr: Option<f32>,
    /// IoU threshold for prf1.
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Side the page is resized to before tokenizing.
    #[arg(long, default_value_t = 112)]
    pub size: usize,
    /// Output PNG (default: `<run dir>/reconstruction.png`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Seeds to run; default 0, 1, 2.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
