use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("budget of {requested} blocks exceeds the {available} eligible blocks (short by {})", requested - available)]
    Budget { requested: usize, available: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("ownership: {0}")]
    Ownership(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("registry: {0}")]
    Registry(String),

    #[error("integrity: {0}")]
    Integrity(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing file {}", .0.display())]
    Missing(PathBuf),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
