use thiserror::Error;

use crate::federation::ProtocolError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label {label} at index {index} is outside the class range [0, {class_count})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        class_count: usize,
    },

    #[error("y_true has {y_true} entries but y_pred has {y_pred}")]
    LengthMismatch { y_true: usize, y_pred: usize },

    #[error("task mismatch: expected {expected}, found {found}")]
    TaskMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),

    #[error("r2 is undefined: targets have zero total variance")]
    DegenerateVariance,

    #[error("invalid metric spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("infeasible partition: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid confusion kernel: {0}")]
    InvalidKernel(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("federation has no participants")]
    EmptyFederation,

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
