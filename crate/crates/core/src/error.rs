use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout mismatch: {left} (len {left_len}) vs {right} (len {right_len})")]
    LayoutMismatch {
        left: String,
        left_len: usize,
        right: String,
        right_len: usize,
    },

    #[error("invalid parameter vector: {0}")]
    InvalidParams(String),

    #[error("bad magic")]
    BadMagic,

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("layout string overflow: {0} bytes")]
    LayoutOverflow(usize),

    #[error("malformed episode line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("stage label {label} out of range for S = {stages}")]
    StageOutOfRange { label: usize, stages: usize },

    #[error("non-monotone stages")]
    NonMonotoneStages,

    #[error("non-monotone timestamps")]
    NonMonotoneTimestamps,

    #[error("invalid episode: {0}")]
    InvalidEpisode(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("task already complete")]
    TaskComplete,

    #[error("environment unsolvable: {0}")]
    Unsolvable(String),

    #[error("non-finite action")]
    NonFiniteAction,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("all-zero weight sum")]
    ZeroWeightSum,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("coefficients off the simplex: {0}")]
    Simplex(String),

    #[error("validation/training overlap: episode {0}")]
    SplitOverlap(u64),

    #[error("missing cells: {}", .0.join(", "))]
    MissingCells(Vec<String>),

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
