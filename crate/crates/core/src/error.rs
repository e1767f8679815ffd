use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// `Invalid` marks a caller-side contract violation (bad shape, bad range,
/// malformed input); everything else is a runtime failure.
#[derive(Debug, Error)]
pub enum KobtError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("parse error at row {row}, column {column}: {reason}")]
    Parse {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl KobtError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        KobtError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KobtError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            KobtError::Invalid { .. } | KobtError::Parse { .. } | KobtError::Shape(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, KobtError>;
