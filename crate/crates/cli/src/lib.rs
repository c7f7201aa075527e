//! `voxcal`: dataset synthesis, staged training, inference, evaluation and
//! ablation over one JSON run configuration.

pub mod commands;
pub mod config;
pub mod record;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use voxcal_core::Error;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(e.into())
    }
}

impl CliError {
    /// 0 success, 2 usage, 3 missing artifact, 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Core(Error::Invalid(_)) => 2,
            Self::Core(Error::MissingArtifact(_)) => 3,
            Self::Core(Error::NumericFailure { .. }) => 4,
            Self::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "voxcal", version, about = "Food energy estimation from a single RGB image")]
pub struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Replace every model with a groundtruth passthrough (eval / ablate).
    #[arg(long, global = true)]
    pub oracle: bool,
    /// Override a config key, e.g. `--set gan.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Train one stage, or all of them in order.
    Train {
        #[arg(value_enum)]
        stage: Stage,
    },
    /// Estimate energy for RGB images; nothing else is read.
    Infer {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Output directory for the JSON estimates (default `<report_dir>/infer`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the full pipeline on the test split.
    Eval,
    /// Evaluate all three configurations over the ablation seeds.
    Ablate,
    /// Print the effective configuration.
    Config,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Gan,
    Regressor,
    Baseline,
    Adaptation,
    All,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.sets, cli.seed)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg, cli.force),
        Command::Train { stage } => commands::train(&cfg, stage),
        Command::Infer { images, out } => commands::infer(&cfg, &images, out.as_deref()),
        Command::Eval => commands::eval(&cfg, cli.oracle),
        Command::Ablate => commands::ablate(&cfg, cli.oracle),
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}
