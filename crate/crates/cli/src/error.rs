use std::path::PathBuf;

use thiserror::Error;
use tor_core::TorError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config file, unknown key or invalid value.
    #[error("{0}")]
    Config(String),

    #[error("numeric abort: {message}; diagnostic dump at {}", dump.display())]
    Numeric { message: String, dump: PathBuf },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(TorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric { .. } => 3,
            CliError::Checkpoint(_) => 4,
            CliError::GradCheck(_) => 5,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<TorError> for CliError {
    fn from(e: TorError) -> Self {
        match e {
            TorError::Config(m) => CliError::Config(m),
            TorError::Checkpoint(m) => CliError::Checkpoint(m),
            other => CliError::Core(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(TorError::Json(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;
