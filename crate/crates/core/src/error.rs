use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} at position {position} is out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { position: usize, id: usize, vocab: usize },

    #[error("sequence of {len} tokens exceeds the maximum length {max_len}")]
    TooLong { len: usize, max_len: usize },

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("evidence for document `{doc}` code `{code}` references token {index} but document has {len} tokens")]
    EvidenceOutOfRange {
        doc: String,
        code: String,
        index: usize,
        len: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("model file {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
