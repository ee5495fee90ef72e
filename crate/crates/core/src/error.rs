use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sketch fingerprint mismatch: {left:016x} vs {right:016x}")]
    SketchMismatch { left: u64, right: u64 },

    #[error("sample {id}: projected embedding has zero norm")]
    DegenerateEmbedding { id: u64 },

    #[error("cross moment needs at least 2 gradients per batch, got {0}")]
    InsufficientBatch(usize),

    #[error("curvature surrogate is indefinite (min eigenvalue {min_eigenvalue:e}); try lambda >= {suggested_lambda:e}")]
    IndefiniteSurrogate {
        min_eigenvalue: f64,
        suggested_lambda: f64,
    },

    #[error("hardest-negative margin undefined for a scoring batch of size 1")]
    MarginUndefined,

    #[error("duplicate sample id {0}")]
    DuplicateSample(u64),

    #[error("all base selection weights are non-positive")]
    DegenerateDistribution,

    #[error("empty pool: {0}")]
    EmptyPool(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt shard at byte offset {offset}: {reason}")]
    CorruptShard { offset: u64, reason: String },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("integer overflow in {0}")]
    Overflow(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
