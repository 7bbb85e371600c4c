use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("row {row}, column `{column}`: cannot parse {value:?} as a number")]
    ParseCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: label {value:?} is not a non-negative integer class index")]
    ParseLabel { row: usize, value: String },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("need at least {needed} samples for k = {k}, got {n}")]
    TooFewSamples { n: usize, k: usize, needed: usize },

    #[error("duplicate points: {count} samples have a zero k-th neighbour distance; increase jitter")]
    DuplicatePoints { count: usize },

    #[error("vacuous threshold: |D| - log V(alpha) = {denominator} is not positive (|D| = {d_size}, alpha = {alpha})")]
    VacuousThreshold {
        d_size: u64,
        alpha: u64,
        denominator: f64,
    },

    #[error("attack training data contains a single class")]
    SingleClass,

    #[error("zero variance in pearson input")]
    ZeroVariance,

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("family member {knobs} failed: {source}")]
    FamilyMember {
        knobs: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
