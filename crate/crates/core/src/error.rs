//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or layer dimension did not line up. The message names the
    /// offending layer or operand.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument was outside its valid domain (non-positive temperature,
    /// empty slice, degenerate generator spec, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A loss term was requested on a batch side that is empty. The trainer
    /// is expected to route around this rather than treat it as fatal.
    #[error("insufficient partition: no {side} rows in batch")]
    EmptyPartition { side: &'static str },

    /// Every product of likelihoods and prior vanished, so the posterior
    /// normalizer is zero.
    #[error("degenerate evidence: posterior normalizer is zero")]
    DegenerateEvidence,

    /// A non-finite value surfaced during training. `path` locates the
    /// parameter or the epoch/batch coordinates.
    #[error("numeric error at {path}: non-finite value")]
    NonFinite { path: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialize(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
