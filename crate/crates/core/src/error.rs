use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("step {t} outside 1..={steps}")]
    InvalidStep { t: usize, steps: usize },

    #[error("singular coefficient: {0}")]
    Singularity(String),

    #[error("mask has no foreground pixels")]
    NoForeground,

    #[error("not enough {category} records: need {needed}, have {available}")]
    Capacity {
        category: String,
        needed: usize,
        available: usize,
    },

    /// Failure talking to an external model client. Callers may retry.
    #[error("transport error: {0}")]
    Transport(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("denoiser failed at step {step}: {source}")]
    Denoiser {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// Whether a retry of the same call could succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}
