//! Command-line harness for `ewc-lora`: single runs, strategy comparisons,
//! parameter sweeps, Fisher-drift diagnostics, reference runs and pretraining.
//!
//! Exit codes: 0 on success, 2 for configuration errors (nothing is written),
//! 3 when training produces a non-finite value, 1 for anything else.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::SweepParam;
pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Engine(ewc_lora::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::Engine(_) => 1,
        }
    }

    pub(crate) fn message(&self) -> String {
        match self {
            CliError::Config(m) | CliError::NonFinite(m) => m.clone(),
            CliError::Engine(e) => e.to_string(),
        }
    }
}

impl From<ewc_lora::Error> for CliError {
    fn from(e: ewc_lora::Error) -> Self {
        match e {
            ewc_lora::Error::NonFinite(m) => CliError::NonFinite(m),
            other => CliError::Engine(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Engine(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "ewc-lora", version, about = "EWC-regularized shared LoRA continual-learning harness")]
pub struct Cli {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seeds, overriding `seed` and `seeds` from the config.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seed: Option<Vec<u64>>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train through the stream and write the accuracy matrix and metrics.
    Run,
    /// Run every strategy in `strategies` under shared seeds.
    CompareStrategies,
    /// Sweep one parameter over its grid.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
    },
    /// Track Fisher drift for the oldest tasks under both regimes.
    Diagnose,
    /// Single-task reference accuracies used by plasticity.
    Reference,
    /// Pretrain the base network on the held-out classes.
    Pretrain,
}

/// Parses, validates and dispatches. Returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &cli.seed {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    let out = &cli.out;
    match &cli.command {
        Command::Run => commands::cmd_run(&cfg, out),
        Command::CompareStrategies => commands::cmd_compare_strategies(&cfg, out),
        Command::Sweep { param } => commands::cmd_sweep(&cfg, *param, out),
        Command::Diagnose => commands::cmd_diagnose(&cfg, out),
        Command::Reference => commands::cmd_reference(&cfg, out),
        Command::Pretrain => commands::cmd_pretrain(&cfg, out),
    }
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
