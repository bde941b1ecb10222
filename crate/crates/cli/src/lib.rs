//! Batch front end: scenario configs, experiment runners and CSV reports.
//!
//! Configs are JSON. A scenario is either one of the builtin scenes
//! (`paper-2d`, `paper-3d`, `paper-warehouse`) or an inline scene object;
//! see `schema.txt` next to any output directory for the column layout of
//! the CSV files.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, SceneConfig};
pub use runner::{cmd_crlb, cmd_montecarlo, cmd_trajectory, cmd_validate};

/// CLI-level errors: config problems or experiment failures.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(std::io::Error),
    Core(rbl_core::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<rbl_core::Error> for CliError {
    fn from(e: rbl_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
