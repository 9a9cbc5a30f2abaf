use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or architecture settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data outside the accepted domain (labels, weights, sizes).
    #[error("input error: {0}")]
    Input(String),

    /// An operation was invoked in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt data in {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("budget infeasible: {budget} FLOPs is below the first exit cost {first_exit} FLOPs")]
    BudgetInfeasible { budget: f64, first_exit: u64 },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("no signal: {0}")]
    NoSignal(String),

    #[error("alignment infeasible: {0}")]
    AlignmentInfeasible(String),

    #[error("matching error: {0}")]
    Matching(String),

    #[error("encoding error: {0}")]
    Encoding(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
