//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed cell in a tabular input. Row/column are 1-based and count the
    /// header as row 1, so they match what an editor shows.
    #[error("parse error in {path} at row {row}, column {col}: {msg}")]
    Parse {
        path: String,
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("site '{0}' was not seen when the model was fitted")]
    UnseenSite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model envelope error: {0}")]
    Schema(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs or configuration, as opposed to
    /// runtime failures. The CLI maps validation errors to exit code 1 and
    /// everything else to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Invalid(_)
                | Error::DimensionMismatch(_)
                | Error::UnseenSite(_)
                | Error::Schema(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
