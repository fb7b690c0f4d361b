use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },

    #[error("line {line}: negative timestamp {time}")]
    NegativeTimestamp { line: usize, time: f64 },

    #[error("line {line}: expected {expected} columns, found {found}")]
    FeatureArity {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: node id {id} overflows the supported id range")]
    NodeIdOverflow { line: usize, id: String },

    #[error("empty stream")]
    EmptyStream,

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("oracle guard exceeded: {0}")]
    GuardExceeded(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("timestamp {got} is not after the last processed time {last}")]
    OutOfOrder { last: f64, got: f64 },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("step {step}: state norm {norm} exceeds the bound {bound}")]
    BoundViolation { step: usize, norm: f64, bound: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("tape already consumed")]
    TapeConsumed,

    #[error("average precision needs at least one positive label")]
    NoPositives,

    #[error("metric needs both positive and negative labels")]
    DegenerateClass,

    #[error("empty evaluation slice")]
    EmptyEvaluation,

    #[error("NaN gradient for parameter {0}")]
    NanGradient(String),

    #[error("config: {0}")]
    Config(String),

    #[error("unknown ablation flag {0:?}")]
    UnknownFlag(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
