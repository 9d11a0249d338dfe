use std::path::PathBuf;

/// Errors raised anywhere in the training loop.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("impossible trajectory: token {token} has zero probability at step {step}")]
    ImpossibleTrajectory { step: usize, token: usize },
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid record: {0}")]
    Invariant(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
