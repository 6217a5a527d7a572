use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: zero-norm row {row}")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward root must hold a single element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("array shape {shape:?} does not match data length {len}")]
    ArrayLength { shape: Vec<usize>, len: usize },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
