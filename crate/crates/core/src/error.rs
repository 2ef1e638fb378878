use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor did not have the shape an operation requires.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A documented precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or Inf showed up where only finite values are allowed.
    #[error("non-finite values in {context}{}", batch.map(|b| format!(" (batch element {b})")).unwrap_or_default())]
    NonFinite {
        context: String,
        batch: Option<usize>,
    },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint did not match the model; the message lists every mismatch.
    #[error("checkpoint mismatch:\n{0}")]
    CheckpointMismatch(String),

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    /// Training produced a non-finite loss; the last good checkpoint is kept.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
