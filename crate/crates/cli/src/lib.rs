//! `cxr`: the command-line pipeline over `cxr_core`.
//!
//! One run-config file drives every subcommand; flags only choose the
//! subcommand and paths.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid run config; the message starts with the field path.
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] cxr_core::Error),
    /// Some requested outputs were not produced.
    #[error("{0}")]
    Incomplete(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Core(_) | CliError::Incomplete(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cxr", version, about = "Small-data chest X-ray classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode, normalize and resize images into a PNG cache.
    Prep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train every family and write snapshot checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Stratified k-fold cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a manifest with a trained ensemble.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
    },
    /// Report metrics for a scores file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
    },
}

/// Run one parsed command line.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Prep { common, manifest } => {
            commands::prep(&RunConfig::load(&common.config)?, manifest, &common.out).map(drop)
        }
        Command::Train { common, manifest } => {
            commands::train(&RunConfig::load(&common.config)?, manifest, &common.out).map(drop)
        }
        Command::Cv { common, manifest } => {
            commands::cv(&RunConfig::load(&common.config)?, manifest, &common.out).map(drop)
        }
        Command::Predict { common, manifest, ensemble } => {
            commands::predict(&RunConfig::load(&common.config)?, manifest, ensemble, &common.out).map(drop)
        }
        Command::Eval { common, scores } => {
            commands::eval(&RunConfig::load(&common.config)?, scores, &common.out).map(drop)
        }
    }
}

/// Parse `args` and run; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("cxr: {e}");
            e.exit_code()
        }
    }
}
