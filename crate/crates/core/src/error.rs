use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Shape or layout disagreement between tensors, slots or checkpoints.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("ingestion error at line {line}: {message}")]
    Ingestion { line: usize, message: String },

    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("entailment oracle failed on premise {premise:?} / hypothesis {hypothesis:?}: {message}")]
    Oracle {
        premise: String,
        hypothesis: String,
        message: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
