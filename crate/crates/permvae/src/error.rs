//! Crate-wide error type.

/// Errors surfaced by the library and mapped to CLI exit codes
/// (validation/config → 1, non-finite numerics → 2).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("fingerprint record {index}: {msg}")]
    FingerprintRecord { index: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite value in {term}{context}")]
    NonFinite { term: String, context: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::DimMismatch(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn non_finite(term: impl Into<String>, context: impl Into<String>) -> Self {
        Error::NonFinite { term: term.into(), context: context.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
