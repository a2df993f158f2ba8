use std::path::Path;

use dmd_core::Error as CoreError;
use thiserror::Error;

/// Failure of a CLI command, carrying the process exit status it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Unparseable or invalid configuration.
    #[error("config error: {0}")]
    Config(String),
    /// A required artifact is absent, unreadable or from another lineage.
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    /// Training diverged or a numeric check failed.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Anything else, typically an output that could not be written.
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Prerequisite(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn missing(path: &Path, what: &str) -> Self {
        CliError::Prerequisite(format!("{what} not found at {}", path.display()))
    }

    /// Wraps a failure to read an artifact as a prerequisite problem.
    pub fn artifact(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Prerequisite(format!("{}: {e}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Diverged { .. } | CoreError::NonFinite { .. } => {
                CliError::Numeric(e.to_string())
            }
            CoreError::LineageMismatch { .. } => CliError::Prerequisite(e.to_string()),
            CoreError::InvalidParameter { .. } | CoreError::Architecture(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
