use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid encoder config: {0}")]
    InvalidEncoderConfig(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("lexical similarity requires token sets")]
    MissingTokens,

    #[error("entry text must be nonempty")]
    EmptyText,

    #[error("invalid retrieval band: delta {delta} must be < epsilon {epsilon}")]
    InvalidBand { delta: f64, epsilon: f64 },

    #[error("invalid retrieval parameter: {0}")]
    InvalidRetrieval(String),

    #[error("unknown entry id {0}")]
    DanglingEntry(u64),

    #[error("kb load failed at record {index}: {reason}")]
    KbRecord { index: usize, reason: String },

    #[error("kb header invalid: {0}")]
    KbHeader(String),

    #[error("encoder config hash mismatch: file has {found}, expected {expected}")]
    EncoderHashMismatch { found: String, expected: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss in batch item {index}")]
    NonFiniteLoss { index: usize },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteEpoch { epoch: usize },

    #[error("non-finite parameter update")]
    NonFiniteUpdate,

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("attacker failed on entry {entry_id}: {reason}")]
    Attacker { entry_id: u64, reason: String },

    #[error("generator failed for policy {policy_id}: {reason}")]
    Generator { policy_id: String, reason: String },

    #[error("record is not confident enough to promote: {0}")]
    NotConfident(String),

    #[error("record already {status}: {key}")]
    RecordClosed { key: String, status: String },

    #[error("unknown feedback record: {0}")]
    UnknownRecord(String),

    #[error("dataset line {line}: {reason}")]
    DatasetLine { line: usize, reason: String },

    #[error("unknown label token {token:?} on line {line}")]
    UnknownLabel { line: usize, token: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
