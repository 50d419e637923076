//! Experiment driver: configuration, the four commands and their artifacts.

pub mod commands;
pub mod config;
pub mod output;
pub mod quantity;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] dmldbp::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    /// 0 ok, 2 configuration, 3 numerics, 4 synchronization or convergence.
    pub fn exit_code(&self) -> i32 {
        use dmldbp::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Parameter(_) | E::Configuration(_) | E::Format(_)) => 2,
            CliError::Core(E::Numeric(_)) => 3,
            CliError::Core(E::Sync(_) | E::Adaptation(_)) => 4,
            CliError::Core(E::Io(_)) | CliError::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
