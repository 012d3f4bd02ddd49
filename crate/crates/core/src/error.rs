use std::path::PathBuf;
use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an operation's input was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Geometric or numerical degeneracy (zero diameter, rank-deficient
    /// cross-covariance, empty mask, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A file or directory required by an operation does not exist.
    #[error("not found: {0}")]
    NotFound(PathBuf),

    /// A file exists but does not conform to the documented format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Registration failed to produce a usable rigid transform.
    #[error("registration failed: {0}")]
    Registration(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
