//! Command-line driver: dataset generation, training, evaluation, baseline
//! comparison and ensemble-size ablation. The `denkf` binary is a thin
//! wrapper around [`run`].

pub mod chart;
pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{resolve, Overrides, RunConfig};

/// Process exit status for each failure class.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl From<denkf::Error> for CliError {
    fn from(e: denkf::Error) -> Self {
        match e {
            denkf::Error::Numeric(m) => Self::Numeric(m),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "denkf", version, about = "Differentiable ensemble Kalman filter experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a task and write train/val/test splits with statistics.
    Generate(CommonArgs),
    /// Train (or resume with --checkpoint) and write checkpoints and a log.
    Train(CommonArgs),
    /// Filter the train and test splits with a checkpoint and report errors.
    Evaluate(CommonArgs),
    /// Tabulate the learned filter against the baselines for the task.
    Compare(CommonArgs),
    /// Error and step time of a checkpoint across ensemble sizes.
    AblateEnsemble(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; created when missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// none, spike:F, blur:W or missing:P.
    #[arg(long)]
    pub corruption: Option<String>,
    #[arg(long)]
    pub ensemble_size: Option<usize>,
    /// paper-default or smoke.
    #[arg(long)]
    pub profile: Option<String>,
    /// Dataset directory from `generate`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            profile: self.profile.clone(),
            config: self.config.clone(),
            seed: self.seed,
            out: self.out.clone(),
            corruption: self.corruption.clone(),
            ensemble_size: self.ensemble_size,
            dataset: self.dataset.clone(),
            checkpoint: self.checkpoint.clone(),
            set: self.set.clone(),
        }
    }
}

/// Cap worker threads from `DENKF_THREADS`.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("DENKF_THREADS") else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("DENKF_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let (name, args) = match &cli.command {
        Command::Generate(a) => ("generate", a),
        Command::Train(a) => ("train", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::Compare(a) => ("compare", a),
        Command::AblateEnsemble(a) => ("ablate-ensemble", a),
    };
    let config = resolve(&args.overrides())?;
    match cli.command {
        Command::Generate(_) => commands::generate(&config),
        Command::Train(_) => commands::train(&config),
        Command::Evaluate(_) => commands::evaluate(&config),
        Command::Compare(_) => commands::compare(&config),
        Command::AblateEnsemble(_) => commands::ablate_ensemble(&config),
    }?;
    manifest::write(&config, name, args.config.as_deref())
}
