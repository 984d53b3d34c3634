use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped by failure class rather than by module so callers can
/// match on what went wrong (bad shapes, bad arguments, bad bytes) without
/// caring where it happened.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Bytes do not follow the expected file format.
    #[error("format error: {0}")]
    Format(String),

    /// The input is recognized but uses a feature outside the supported subset.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Weights container problems (missing tensors, shape mismatches, bad records).
    #[error("weights error: {0}")]
    Weights(String),

    /// A referenced file could not be read or written.
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
