//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ElaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("target not visible: {0}")]
    Visibility(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("bad configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ElaError>;
