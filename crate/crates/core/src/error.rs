use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a zero vector (norm {norm:e})")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("temperature must be positive and finite, got {0}")]
    TemperatureNonPositive(f64),

    #[error("no temperature parameter for task `{0}`")]
    MissingTaskTheta(String),

    #[error("invalid loss config: {0}")]
    InvalidConfig(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("featurizer input text is empty")]
    EmptyText,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid soup weights: {0}")]
    WeightsInvalid(String),

    #[error("invalid generation spec: {0}")]
    SpecInvalid(String),

    #[error("manifest contains no image classification dataset")]
    NoClassificationData,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("batch infeasible: dataset `{dataset}` has {available} distinct targets, batch needs {needed}")]
    BatchInfeasible {
        dataset: String,
        available: usize,
        needed: usize,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimMismatch { context, expected, got }
    }
}
