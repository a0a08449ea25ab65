use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("{path}: produced by config {found}, current config is {expected} (use --force to override)")]
    HashMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing(_) => 2,
            CliError::Schema(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::HashMismatch { .. } => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl From<nowcast_core::Error> for CliError {
    fn from(e: nowcast_core::Error) -> Self {
        match e {
            nowcast_core::Error::Format(m) => CliError::Schema(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<nowcast_model::Error> for CliError {
    fn from(e: nowcast_model::Error) -> Self {
        match e {
            nowcast_model::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            nowcast_model::Error::Core(c) => c.into(),
            nowcast_model::Error::Checkpoint(m) => CliError::Schema(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
