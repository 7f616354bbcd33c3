use std::path::PathBuf;

use grcl_core::GrclError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Core(#[from] GrclError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{failed} of {total} cells failed")]
    CellsFailed { failed: usize, total: usize },

    #[error("report input: {0}")]
    Report(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 config, 2 runtime, 3 report input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::InvalidConfig(_) => 1,
            CliError::Core(GrclError::InvalidConfig(_)) => 1,
            CliError::Report(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
