use thiserror::Error;

/// Errors produced by the simdet library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents are inconsistent with what an operation requires.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A scalar argument or configuration value is out of its valid range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A data file or directory could not be interpreted.
    #[error("format error: {0}")]
    Format(String),
    /// An iterative solver stopped before reaching its tolerance.
    #[error("did not converge: {0}")]
    NotConverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
