use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KtdError>;

#[derive(Debug, Error)]
pub enum KtdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An object is in the wrong state for the requested operation, e.g. a
    /// weight bundle that was built for a different network spec.
    #[error("state error: {0}")]
    State(String),

    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl KtdError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        KtdError::InvalidArgument(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        KtdError::State(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KtdError::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::KtdError::InvalidArgument(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
