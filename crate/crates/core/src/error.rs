use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite or otherwise unusable numeric input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Shape or pairing mismatch between operands.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// A split protocol cannot be satisfied by the graph.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training error: {0}")]
    Training(String),

    /// A theorem precondition (rank condition, non-singularity) does not hold.
    #[error("condition error: {0}")]
    Condition(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
