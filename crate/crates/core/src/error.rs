use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad input data: wrong shapes, too-short audio, malformed records.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent or incomplete configuration, missing prerequisites.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{backend} backend failed: {message}")]
    Backend { backend: String, message: String },

    /// Training diverged (NaN/Inf loss).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("audio codec error: {0}")]
    Audio(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(backend: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Backend {
            backend: backend.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the caller's inputs or configuration, as
    /// opposed to failures while doing the work.
    pub fn is_user_error(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Config(_) | Error::Json(_))
    }
}
