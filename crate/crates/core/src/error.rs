//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("zero-norm vector in {context}")]
    ZeroNorm { context: &'static str },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("batch length mismatch: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("cluster count {k} exceeds {points} points for fresh initialization")]
    TooFewPoints { k: usize, points: usize },
    #[error("missing cluster assignment for batch row {row}")]
    MissingAssignment { row: usize },
    #[error("expected a probability vector: {0}")]
    NotProbability(String),
    #[error("expected a one-hot vector")]
    NotOneHot,
    #[error("no events in cohort")]
    NoEvents,
    #[error("no comparable pairs under the concordance definition")]
    NoComparablePairs,
    #[error("need at least {needed} subjects, got {got}")]
    TooFewSubjects { needed: usize, got: usize },
    #[error("volume shape {got:?} does not match expected {expected:?}")]
    VolumeShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("non-finite loss term {term} at epoch {epoch}")]
    NonFiniteLoss { term: &'static str, epoch: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads <= {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("checkpoint has no section named {0}")]
    MissingSection(String),
    #[error("duplicate patient id {0}")]
    DuplicateId(String),
    #[error("patient {id}: {message}")]
    InvalidRecord { id: String, message: String },
    #[error("unknown imputation strategy {0:?}")]
    UnknownStrategy(String),
    #[error("imputation requires exactly one missing modality, {present} of 3 present")]
    WrongMissingCount { present: usize },
    #[error("manifest error: {0}")]
    Manifest(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
