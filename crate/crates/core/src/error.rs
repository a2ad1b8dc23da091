use std::path::PathBuf;

use crate::npy::NpyError;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("npy error in {context}: {source}")]
    Npy {
        context: String,
        #[source]
        source: NpyError,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("inconsistent sample count: {what} has {found} samples, expected {expected}")]
    InconsistentSampleCount {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("archive has no logits")]
    MissingLogits,
    #[error("label {label} at sample {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: i64,
        num_classes: usize,
    },
    #[error("MissingLabels: archive has no labels")]
    MissingLabels,
    #[error("EmptyClass: class {0} has no samples")]
    EmptyClass(usize),
    #[error("SingularCovariance: covariance of layer {layer} is not positive definite (last ridge {ridge:e})")]
    SingularCovariance { layer: usize, ridge: f64 },
    #[error("DimensionMismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("LayerMismatch: {0}")]
    LayerMismatch(String),
    #[error("EmptyPredictedClass: no class received any predicted sample")]
    EmptyPredictedClass,
    #[error("NonFiniteLogit: logit {value} at position {index}")]
    NonFiniteLogit { index: usize, value: f64 },
    #[error("EmptyArchive: archive has no samples")]
    EmptyArchive,
    #[error("EmptyScores: no scores to calibrate on")]
    EmptyScores,
    #[error("EmptySeries: score series is empty")]
    EmptySeries,
    #[error("NonFiniteScore: score {value} at position {index}")]
    NonFiniteScore { index: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model directory: {0}")]
    InvalidModel(String),
}

impl Error {
    /// Process exit code for this error: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::SingularCovariance { .. }
            | Error::NonFiniteLogit { .. }
            | Error::NonFiniteScore { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn npy(context: impl Into<String>, source: NpyError) -> Self {
        Error::Npy {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
