//! `smoe`: train, apply and evaluate sparse mixture-of-experts denoisers.

mod commands;
mod config;
mod data;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "smoe",
    version,
    about = "Sparse mixture-of-experts image denoising"
)]
struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Experiment config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Render a synthetic phantom.
    GenPhantom(GenPhantomArgs),
    /// Corrupt an image with Rician or Gaussian noise.
    AddNoise(AddNoiseArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Denoise one image.
    Denoise(DenoiseArgs),
    /// Score a model on a dataset and write a CSV report.
    Eval(EvalArgs),
    /// Compare gating overrides on a dataset.
    Ablate(AblateArgs),
    /// Paint each tile with its predicted cluster.
    Clustermap(ClustermapArgs),
    /// Pixel-wise absolute error between two images.
    Errormap(ErrormapArgs),
    /// Compare analytic and numerical gradients on small random nets.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenPhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Plain Shepp-Logan instead of a randomized phantom.
    #[arg(long)]
    pub shepp_logan: bool,
}

#[derive(Debug, Args)]
pub struct AddNoiseArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "rician")]
    pub model: String,
    #[arg(long)]
    pub sigma: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Where images come from: a directory with `clean/` and `noisy/`, or
/// generated phantoms.
#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// Directory holding `clean/` and `noisy/` with matching file names.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate this many phantom pairs instead of reading `--data`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Seed for synthetic phantoms and their noise.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Noise model for synthetic data.
    #[arg(long)]
    pub noise_model: Option<String>,
    /// Comma-separated noise levels, cycled over synthetic images.
    #[arg(long)]
    pub sigmas: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `patch` or `segment`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Segment masks: `threshold` or `files` (read from `<data>/masks/<image>/`).
    #[arg(long)]
    pub masks: Option<String>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub middle_layers: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// `raw` or `embeddings` (read from `<data>/embeddings/<image>/`).
    #[arg(long)]
    pub features: Option<String>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct AuxArgs {
    /// Mask directory for models trained with mask files.
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
    /// Embedding directory for models using external features.
    #[arg(long)]
    pub embedding_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `predicted`, `fixed:ID` or `random:SEED`.
    #[arg(long, default_value = "predicted")]
    pub gating: String,
    /// Optional CSV listing the expert used for every region.
    #[arg(long)]
    pub routes: Option<PathBuf>,
    #[command(flatten)]
    pub aux: AuxArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "predicted")]
    pub gating: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Single override to run. Without it every fixed expert, one random
    /// draw and the predicted gate are compared.
    #[arg(long)]
    pub gating: Option<String>,
    /// Seed of the random-gating row when `--gating` is absent.
    #[arg(long, default_value_t = 0)]
    pub random_seed: u64,
}

#[derive(Debug, Args)]
pub struct ClustermapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub aux: AuxArgs,
}

#[derive(Debug, Args)]
pub struct ErrormapArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// `.pgm` output is min-max stretched; other extensions keep raw values.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub nets: u64,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 1)]
    pub middle_layers: usize,
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn init_threads(threads: Option<usize>) -> CliResult<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    log::warn!("built without parallelism; --threads {n} ignored");
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    init_threads(cli.threads)?;
    let cfg = config::ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenPhantom(a) => commands::gen_phantom(&a),
        Command::AddNoise(a) => commands::add_noise(&a),
        Command::Train(a) => commands::train(&a, &cfg),
        Command::Denoise(a) => commands::denoise(&a),
        Command::Eval(a) => commands::eval(&a, &cfg),
        Command::Ablate(a) => commands::ablate(&a, &cfg),
        Command::Clustermap(a) => commands::clustermap(&a),
        Command::Errormap(a) => commands::errormap(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}

fn run<I: IntoIterator<Item = OsString>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    std::process::exit(run(std::env::args_os()));
}
