//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch between tensors, naming the offending axes.
    #[error("dimension error in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk artifact (manifest, checkpoint, record file).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    pub fn dimension(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
