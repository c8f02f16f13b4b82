//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Tensor or image dimensions do not match what an operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A mathematical operation was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Missing or inconsistent run configuration (datasets, checkpoints, keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// Image encode/decode failure.
    #[error("image error: {0}")]
    Image(String),

    /// Checkpoint or stats file does not parse or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
