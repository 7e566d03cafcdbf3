use std::path::PathBuf;

use thiserror::Error;

use crate::adapt::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: {msg}")]
    LayerShape { layer: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward called without a preceding train-mode forward")]
    NoForwardCache,

    #[error("degenerate normalization at layer {layer}: {population} value(s) per channel, need at least 2")]
    DegenerateBatch { layer: usize, population: usize },

    #[error("unknown task id {0}")]
    UnknownTask(TaskId),

    #[error("task id {0} is already registered")]
    DuplicateTask(TaskId),

    #[error("snapshot does not match model: {0}")]
    SignatureMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("data error{}: {msg}", row.map(|r| format!(" (manifest row {r})")).unwrap_or_default())]
    Data { row: Option<usize>, msg: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 configuration, 3 data, 4 numeric/runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownTask(_) | Error::DuplicateTask(_) | Error::Json(_) => 2,
            Error::Data { .. } | Error::Io { .. } | Error::Csv(_) | Error::LabelOutOfRange { .. } => 3,
            _ => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn data(row: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Data { row, msg: msg.into() }
    }
}
