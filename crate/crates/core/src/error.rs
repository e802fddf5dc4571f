use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("missing resource: {0}")]
    MissingResource(String),
    #[error("non-finite loss at step {step} (batch {batch}): {detail}")]
    Numeric {
        step: u64,
        batch: usize,
        detail: String,
    },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
