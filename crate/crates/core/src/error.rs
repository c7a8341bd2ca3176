use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is rank deficient (smallest singular value {0:e})")]
    DegenerateMatrix(f64),

    #[error("grid level {level} exceeds the maximum supported level {max}")]
    LevelTooLarge { level: u32, max: u32 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("first query does not coincide with the ground truth rotation (off by {0:e} rad)")]
    QueryMissingGroundTruth(f64),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("no grid cell passes the density floor")]
    EmptyModeSet,

    #[error("record {0} has no full ground-truth orbit")]
    MissingFullGroundTruth(usize),

    #[error("operation requires matrix query format")]
    UnsupportedFormat,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input data rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidConfig(_))
    }
}
