//! Experiment runner for [`prefguide_core`]: TOML configuration, CSV
//! histories and summaries, plain-text checkpoints.

use std::path::Path;

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod output;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}: {1}")]
    Csv(String, csv::Error),
    #[error(transparent)]
    Core(#[from] prefguide_core::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: `2` for configuration problems, `1` otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(prefguide_core::Error::Parameter(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
