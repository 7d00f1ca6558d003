use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBundle;

pub type Result<T, E = CcrError> = std::result::Result<T, E>;

/// Failure categories surface as distinct CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum CcrError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite loss at step {step}: {losses:?}")]
    NonFinite { step: u64, losses: Box<LossBundle> },
}

impl CcrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CcrError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            CcrError::Config(_) | CcrError::Version { .. } => ErrorCategory::Config,
            CcrError::NonFinite { .. } => ErrorCategory::Numerical,
            CcrError::Io { .. }
            | CcrError::Format(_)
            | CcrError::Truncated(_)
            | CcrError::Data(_)
            | CcrError::Shape(_) => ErrorCategory::Data,
        }
    }
}
