use std::path::PathBuf;

use fsc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{0}` is already registered")]
    DuplicateTask(String),
    #[error("task `{0}` has no registered parameters")]
    UnregisteredTask(String),
    #[error("support set is empty")]
    EmptySupport,
    #[error("support set has {got} pairs, need at least {need}")]
    SupportTooSmall { got: usize, need: usize },
    #[error("attempt to modify frozen parameter `{0}`")]
    FrozenMutation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }

    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        CoreError::Config { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
