use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};

mod commands;
mod failure;
mod manifest;

use failure::{CmdResult, Failure};

const THREADS_ENV: &str = "SUBALIGN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "subalign", version, about = "Test-time adaptation by subspace alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a shifted source/target pair of labelled feature sets.
    GenSynth(GenSynthArgs),
    /// Train the source model and store its latent subspace.
    TrainSource(TrainSourceArgs),
    /// Choose the subspace dimension from source and target spectra.
    EstimateDim(EstimateDimArgs),
    /// Adapt a source model to unlabelled target features.
    Adapt(AdaptArgs),
    /// Accuracy and calibration of a model, optionally through an alignment.
    Eval(EvalArgs),
    /// Adapt several hypotheses for the shift gate.
    BuildEnsemble(BuildEnsembleArgs),
    /// Score inter-hypothesis consistency and gate predictions.
    Detect(DetectArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// JSON generator config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSourceArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub out_subspace: PathBuf,
    /// JSON training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stored subspace dimension, or `auto`.
    #[arg(long, default_value = "auto")]
    pub sub_dim: String,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 1e6)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EstimateDimArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub source_subspace: PathBuf,
    #[arg(long)]
    pub target_features: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 1e6)]
    pub epsilon: f64,
    /// Also write the result here, with a manifest next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Required for `cattan`.
    #[arg(long)]
    pub source_subspace: Option<PathBuf>,
    #[arg(long)]
    pub target_features: PathBuf,
    /// Reported only; adaptation never reads them.
    #[arg(long)]
    pub target_labels: Option<PathBuf>,
    /// cattan, tent, tent-plus or lr-cb. Overrides the config.
    #[arg(long)]
    pub method: Option<String>,
    /// JSON adaptation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config subspace dimension (count or `auto`).
    #[arg(long)]
    pub sub_dim: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Alignment matrix (EMB1, d×d). Needs both subspaces.
    #[arg(long, requires_all = ["source_subspace", "target_subspace"])]
    pub alignment: Option<PathBuf>,
    #[arg(long, requires = "alignment")]
    pub source_subspace: Option<PathBuf>,
    #[arg(long, requires = "alignment")]
    pub target_subspace: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildEnsembleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub source_subspace: PathBuf,
    #[arg(long)]
    pub target_features: PathBuf,
    /// JSON adaptation config shared by every hypothesis.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON ensemble config (threshold and subset strategies).
    #[arg(long)]
    pub ensemble_config: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sub_dim: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub ensemble_dir: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Overrides the stored threshold.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Write the per-sample lines here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn configure_threads() -> CmdResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(Failure::usage)
}

fn run(cli: Cli) -> CmdResult<()> {
    configure_threads()?;
    match cli.command {
        Command::GenSynth(args) => commands::gen_synth(&args),
        Command::TrainSource(args) => commands::train_source(&args),
        Command::EstimateDim(args) => commands::estimate_dim(&args),
        Command::Adapt(args) => commands::adapt(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::BuildEnsemble(args) => commands::build_ensemble(&args),
        Command::Detect(args) => commands::detect(&args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(failure) = run(cli) {
        eprintln!("error: {:#}", failure.error);
        process::exit(failure.code as i32);
    }
}
