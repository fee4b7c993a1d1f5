use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),

    #[error("unknown item id `{item_id}` referenced by user `{user_id}`")]
    UnknownItem { user_id: String, item_id: String },

    #[error("invalid item `{item_id}`: {reason}")]
    InvalidItem { item_id: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("item `{0}` has none of the selected attributes")]
    EmptyItemText(String),

    #[error("empty item list")]
    EmptySequence,

    #[error("token id {id} is not assigned (vocabulary size {size})")]
    UnassignedToken { id: u32, size: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("target sequence has no non-pad tokens")]
    EmptyTargets,

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("masked item needs {needed} tokens but the sequence cap is {cap}")]
    SequenceOverflow { needed: usize, cap: usize },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint tensor `{name}` is {found}, expected {expected}")]
    TensorMismatch {
        name: String,
        expected: String,
        found: String,
    },

    #[error("domain `{domain}` has {available} eligible items, {needed} negatives requested")]
    InsufficientItems {
        domain: String,
        available: usize,
        needed: usize,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
