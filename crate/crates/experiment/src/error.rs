use std::path::PathBuf;

use thiserror::Error;

use crate::plan::KeyBinding;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid block plan: {0}")]
    InvalidPlan(String),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("unknown response key {key:?}")]
    UnknownKey { key: String, key_map: Vec<KeyBinding> },

    #[error("invalid response: {0}")]
    InvalidResponse(String),

    /// Duplicate or out-of-order response.
    #[error("conflict: {0}")]
    Conflict(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt session log {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error(transparent)]
    Core(#[from] anytime_core::Error),
}

impl ServiceError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.into(),
            source,
        }
    }
}
