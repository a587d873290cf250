use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("token id {id} at position {position} is out of range for vocab size {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("singular system while solving {context}: {detail}")]
    Singular { context: String, detail: String },

    #[error("recovery order violation: expected {expected}, got {got}")]
    OrderViolation { expected: String, got: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure stems from bad input (files, flags, plans)
    /// rather than from an internal numerical or logic fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Singular { .. } | Error::OrderViolation { .. } | Error::Shape { .. }
        )
    }
}
