use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// A layer or model was configured with incompatible shapes or ranges.
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A forward or backward pass produced NaN or Inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Malformed input data (images, datasets, feature files).
    #[error("data error: {0}")]
    Data(String),
    /// Malformed or corrupt container/checkpoint file.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
