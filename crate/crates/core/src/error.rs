use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A domain invariant was violated; `field` names the offending field.
    #[error("invalid {field}: {reason}")]
    Invariant { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("motion CSV: {0}")]
    Csv(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("non-finite objective at iteration {iteration}")]
    NonFinite { iteration: usize, trace: Vec<f64> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn invariant(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
