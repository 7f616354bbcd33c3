use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GrclError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GrclError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("dual solver did not converge after {iterations} iterations (residual {residual:e})")]
    SolverNonConvergence {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("constraint violated after projection at step {step}: {detail}")]
    InfeasibleUpdate { step: usize, detail: String },

    #[error("domain memory is empty")]
    EmptyMemory,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GrclError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GrclError::Io {
            path: path.into(),
            source,
        }
    }
}
