//! Experiment runner for `refavg-core`: configuration files, subcommands,
//! artifact writing and the acceptance suite behind the `refavg` binary.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod output;

use refavg_core::averaging::AveragingError;
use refavg_core::fast::FastError;
use refavg_core::stats::StatsError;
use refavg_core::{PoissonError, SimError};
use serde_json::{json, Value};
use thiserror::Error;

pub use config::{ConfigError, ExperimentConfig, Overrides};
pub use output::{Format, Provenance, Table};

/// Environment variable naming the output directory used when neither
/// `--out` nor `[outputs] directory` is given.
pub const OUT_DIR_ENV: &str = "REFAVG_OUT_DIR";

pub mod exit {
    pub const OK: i32 = 0;
    pub const CRITERION_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Output(#[from] output::OutputError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
    #[error(transparent)]
    Poisson(#[from] PoissonError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Fast(#[from] FastError),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Output(_) => exit::USAGE,
            CliError::Sim(SimError::InvalidConfig(_)) => exit::USAGE,
            CliError::Poisson(PoissonError::Unsupported) => exit::USAGE,
            CliError::Fast(FastError::InvalidEpsilon(_)) => exit::USAGE,
            _ => exit::NUMERICAL,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Output(_) => "output",
            CliError::Sim(SimError::InvalidConfig(_)) => "config",
            CliError::Sim(_) => "simulation",
            CliError::Averaging(_) => "averaging",
            CliError::Poisson(_) => "poisson",
            CliError::Stats(_) => "statistics",
            CliError::Fast(_) => "fast-process",
            CliError::Numerical(_) => "numerical",
        }
    }

    /// One-line JSON record for the diagnostic stream.
    pub fn record(&self) -> Value {
        let mut v = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let CliError::Config(c) = self {
            if let Some(line) = c.line() {
                v["line"] = json!(line);
            }
            if let Some((section, key)) = c.location() {
                v["section"] = json!(section);
                v["key"] = json!(key);
            }
        }
        match self {
            CliError::Sim(SimError::NonFinite { replica, step })
            | CliError::Sim(SimError::Coefficient { replica, step, .. })
            | CliError::Sim(SimError::Fast { replica, step, .. }) => {
                v["replica"] = json!(replica);
                v["step"] = json!(step);
            }
            _ => {}
        }
        v
    }
}
