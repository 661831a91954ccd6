use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("precision mismatch: {0}")]
    PrecisionMismatch(String),

    #[error("invalid cu_seqlens: {0}")]
    InvalidSeqlens(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("query row {row} has no visible keys")]
    NoVisibleKeys { row: usize },

    #[error("prompt group `{0}` is split across micro-batches")]
    SplitGroup(String),

    #[error("prompt `{0}` has inconsistent prompt tokens across records")]
    InconsistentPrompt(String),

    #[error("prompt group `{prompt_id}` has {size} responses, exceeding micro-batch capacity {capacity}")]
    GroupTooLarge {
        prompt_id: String,
        size: usize,
        capacity: usize,
    },

    #[error("packing mode {batch:?} does not match attention backend {backend:?}")]
    ModeMismatch { batch: String, backend: String },

    #[error("division by zero in {0}")]
    ZeroDenominator(&'static str),

    #[error("configuration needs ~{needed} bytes, above the {limit}-byte limit")]
    TooLarge { needed: u64, limit: u64 },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}
