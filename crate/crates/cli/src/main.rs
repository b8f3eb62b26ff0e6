//! `mmcd`: synthesize, preprocess, train, detect and evaluate.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "mmcd", version, about = "Unsupervised change detection for heterogeneous image pairs")]
struct Cli {
    /// JSON run configuration; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic co-registered pair with known change
    Synth(SynthArgs),
    /// Log-transform and/or normalize a raster
    Preprocess(PreprocessArgs),
    /// Train the coupled autoencoders on an image pair
    Train(TrainArgs),
    /// Translate both images and threshold the difference image
    Detect(DetectArgs),
    /// Score a binary change map against ground truth
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sets both height and width
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub channels_x: Option<usize>,
    #[arg(long)]
    pub channels_y: Option<usize>,
    #[arg(long)]
    pub change_fraction: Option<f64>,
    #[arg(long)]
    pub noise_std_x: Option<f64>,
    #[arg(long)]
    pub noise_std_y: Option<f64>,
    /// Correlation length of the land-cover field in pixels
    #[arg(long)]
    pub smoothness: Option<f64>,
    /// Multiplicative gamma speckle on Y with this many looks; 0 disables it
    #[arg(long)]
    pub speckle_looks: Option<f64>,
}

#[derive(Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Apply `ln(v + epsilon)` before normalizing
    #[arg(long)]
    pub log: bool,
    #[arg(long, default_value_t = mmcd_core::raster::DEFAULT_LOG_EPSILON)]
    pub epsilon: f64,
    /// Skip the percentile normalization
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Print the resolved training configuration and exit
    #[arg(long)]
    pub print_config: bool,
    #[arg(long)]
    pub x: Option<PathBuf>,
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub affinity_crop: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay_main: Option<f64>,
    #[arg(long)]
    pub lr_decay_code: Option<f64>,
    #[arg(long)]
    pub lr_decay_every: Option<u32>,
    /// Comma-separated one-based epochs after which the prior is recomputed
    #[arg(long, value_delimiter = ',')]
    pub prior_epochs: Option<Vec<u32>>,
    #[arg(long)]
    pub lambda_r: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_t: Option<f64>,
    #[arg(long)]
    pub lambda_z: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Filters of the hidden layers
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub leaky_slope: Option<f64>,
    #[arg(long)]
    pub amsgrad: bool,
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub tile_overlap: Option<usize>,
}

#[derive(Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub x: Option<PathBuf>,
    #[arg(long)]
    pub y: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Gaussian smoothing of the difference image; 0 disables it
    #[arg(long)]
    pub filter_sigma: Option<f64>,
    /// Histogram bins for Otsu's threshold
    #[arg(long)]
    pub bins: Option<usize>,
    /// Use unsquared per-pixel norms in the difference image
    #[arg(long)]
    pub root: bool,
    #[arg(long)]
    pub weight_x: Option<f64>,
    #[arg(long)]
    pub weight_y: Option<f64>,
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub tile_overlap: Option<usize>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Directory for metrics.json and confusion.png
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print metrics as JSON
    #[arg(long)]
    pub json: bool,
    /// Chance agreement from the standard marginal products
    #[arg(long)]
    pub kappa_standard: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(args) => commands::synth(cfg, args),
        Command::Preprocess(args) => commands::preprocess(args),
        Command::Train(args) => commands::train(cfg, args),
        Command::Detect(args) => commands::detect(cfg, args),
        Command::Evaluate(args) => commands::evaluate(cfg, args),
    }
}
