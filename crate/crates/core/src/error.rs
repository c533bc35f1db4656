use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing pyramid level {0}")]
    MissingLevel(usize),

    #[error("input extent {extent} is not divisible by {divisor}; pad to {padded}")]
    Indivisible { extent: usize, divisor: usize, padded: usize },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iter}: non-finite loss")]
    Diverged { iter: usize },

    #[error("miss rate undefined: no ground truth boxes in the evaluation set")]
    NoGroundTruth,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
