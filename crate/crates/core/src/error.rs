use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid attention mask: query row {row} has no unmasked key")]
    InvalidMask { row: usize },

    #[error("empty batch: every target position is ignored")]
    EmptyBatch,

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt file {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("dataset validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidMask { .. } => "invalid_mask",
            Error::EmptyBatch => "empty_batch",
            Error::Numeric(_) => "numeric",
            Error::Vocabulary(_) => "vocabulary",
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Corruption { .. } => "corruption",
            Error::Validation(_) => "validation",
            Error::Metric(_) => "metric",
            Error::Training(_) => "training",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
