use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use wsivit_core::dataset::SplitMode;
use wsivit_core::inference::VoteConfig;
use wsivit_core::tiling::{ExtractionMethod, ThresholdMode, TileConfig};
use wsivit_core::training::TrainConfig;
use wsivit_core::vit::ViTConfig;

/// Weakly-supervised whole-slide image classification with a Vision
/// Transformer.
///
/// Exit status: 0 success, 1 runtime error, 2 usage error, 3 indeterminate
/// diagnosis.
#[derive(Debug, Parser)]
#[command(name = "wsivit", version, propagate_version = true)]
pub struct Cli {
    /// Global seed; each stage derives its own seed from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Base directory for relative output paths.
    #[arg(long, global = true, env = "WSIVIT_OUT_DIR", value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic two-class slides and their manifest.
    Synth(SynthArgs),
    /// Cut labeled patches from the slides of a manifest.
    Extract(ExtractArgs),
    /// Merge patch manifests into one dataset.
    Dataset(DatasetArgs),
    /// Assign every patch of a manifest to a fold.
    Folds(FoldsArgs),
    /// Train a model on a manifest or on one fold's training side.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest or on one fold's test side.
    Eval(EvalArgs),
    /// Train and evaluate every fold and write a summary table.
    Experiment(ExperimentArgs),
    /// Majority-vote diagnosis of one slide.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for slide PNGs and slides.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Slides per class.
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    /// Slide width and height in pixels.
    #[arg(long, default_value_t = 1000)]
    pub size: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Grid,
    Region,
}

impl From<MethodArg> for ExtractionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Grid => ExtractionMethod::Grid,
            MethodArg::Region => ExtractionMethod::Region,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ThresholdArg {
    Otsu,
    Fixed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Patch,
    Slide,
}

impl From<ModeArg> for SplitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Patch => SplitMode::PatchLevel,
            ModeArg::Slide => SplitMode::SlideLevel,
        }
    }
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// Patch width and height at extraction magnification.
    #[arg(long, default_value_t = 100)]
    pub patch_size: usize,
    /// Magnification patches are cut at.
    #[arg(long, default_value_t = 20)]
    pub magnification: u32,
    /// Grid stride in pixels [default: the patch size].
    #[arg(long)]
    pub stride: Option<usize>,
    /// Minimum tissue fraction for a patch to be kept.
    #[arg(long, default_value_t = 0.5)]
    pub min_coverage: f64,
    /// Tissue threshold selection.
    #[arg(long, value_enum, default_value_t = ThresholdArg::Otsu)]
    pub threshold: ThresholdArg,
    /// Fixed luminance threshold, also the cap and fallback for Otsu.
    #[arg(long, default_value_t = 220)]
    pub fixed_threshold: u8,
    /// Luminance smoothing radius before thresholding (0 disables).
    #[arg(long, default_value_t = 16)]
    pub smoothing_radius: usize,
    /// Extraction worker threads [default: available cores].
    #[arg(long)]
    pub workers: Option<usize>,
}

impl TileArgs {
    pub fn config(&self) -> TileConfig {
        TileConfig {
            patch_size: self.patch_size,
            extraction_magnification: self.magnification,
            stride: self.stride.unwrap_or(self.patch_size),
            min_tissue_coverage: self.min_coverage,
            threshold_mode: match self.threshold {
                ThresholdArg::Otsu => ThresholdMode::Otsu,
                ThresholdArg::Fixed => ThresholdMode::Fixed,
            },
            fixed_threshold: self.fixed_threshold,
            smoothing_radius: self.smoothing_radius,
            workers: self.workers.unwrap_or_else(|| {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            }),
        }
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Slide manifest CSV (slide_id,path,label,scan_magnification).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Directory of per-slide region files named {slide_id}.csv.
    #[arg(long, required_if_eq("method", "region"))]
    pub regions: Option<PathBuf>,
    /// Output directory for patch PNGs and manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tile: TileArgs,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Patch manifests to merge, in order.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Merged manifest path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FoldsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of folds.
    #[arg(long, default_value_t = 10, conflicts_with = "holdout_rounds")]
    pub k: usize,
    /// Split unit.
    #[arg(long, value_enum, default_value_t = ModeArg::Patch)]
    pub mode: ModeArg,
    /// Draw this many random holdout splits instead of k folds.
    #[arg(long)]
    pub holdout_rounds: Option<usize>,
    /// Test share of each holdout round.
    #[arg(long, default_value_t = 0.1, requires = "holdout_rounds")]
    pub test_fraction: f64,
    /// Plan output path (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 100)]
    pub image_size: usize,
    /// Token tile size inside the model.
    #[arg(long, default_value_t = 10)]
    pub token_patch: usize,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub mlp_ratio: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
}

impl ModelArgs {
    pub fn config(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            token_patch_size: self.token_patch,
            channels: 3,
            embed_dim: self.embed_dim,
            n_heads: self.heads,
            n_blocks: self.blocks,
            mlp_ratio: self.mlp_ratio,
            n_classes: 2,
            dropout_rate: self.dropout,
        }
    }
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    /// Keep the manifest order in every epoch.
    #[arg(long)]
    pub no_shuffle: bool,
    /// Evaluate every this many epochs when an eval set exists (0 = never).
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    /// Class code treated as positive in metrics.
    #[arg(long, default_value_t = 0)]
    pub positive_class: u8,
    /// Decoded patches kept in memory.
    #[arg(long, default_value_t = 8192)]
    pub cache: usize,
}

impl OptimArgs {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            seed,
            shuffle: !self.no_shuffle,
            eval_every: self.eval_every,
            positive_class: self.positive_class,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Patch manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fold plan; trains on every fold except --fold.
    #[arg(long, requires = "fold")]
    pub folds: Option<PathBuf>,
    /// Held-out fold index.
    #[arg(long, requires = "folds")]
    pub fold: Option<usize>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training history output [default: <out>.history.json].
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fold plan; evaluates on the test side of --fold.
    #[arg(long, requires = "fold")]
    pub folds: Option<PathBuf>,
    #[arg(long, requires = "folds")]
    pub fold: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub positive_class: u8,
    /// Metrics report output (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8192)]
    pub cache: usize,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("plan").required(true).args(["folds", "holdout"])))]
pub struct ExperimentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// k-fold plan from `folds`.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Holdout plan from `folds --holdout-rounds`.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Output directory for per-fold results and the summary.
    #[arg(long)]
    pub out: PathBuf,
    /// Row label in the summary table [default: patch count and methods].
    #[arg(long)]
    pub label: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Slide raster (PNG or PPM).
    #[arg(long)]
    pub slide: PathBuf,
    /// Slide id in the report [default: file stem].
    #[arg(long)]
    pub slide_id: Option<String>,
    /// Magnification the slide was scanned at.
    #[arg(long, default_value_t = 20)]
    pub scan_magnification: u32,
    /// Patches to sample.
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Votes a class needs to become the diagnosis.
    #[arg(long, default_value_t = 3)]
    pub majority: usize,
    #[arg(long, default_value_t = 0)]
    pub positive_class: u8,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub tile: TileArgs,
}

impl PredictArgs {
    pub fn vote(&self, seed: u64) -> VoteConfig {
        VoteConfig {
            n_patches: self.n,
            required_majority: self.majority,
            seed,
            positive_class: self.positive_class,
        }
    }
}
