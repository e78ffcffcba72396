//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any operation in this crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("tokenization produced no tokens for post {id}")]
    EmptyPost { id: String },

    #[error("malformed dataset line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("label {label} out of range [0, {class_count}) for record {id}")]
    LabelOutOfRange {
        id: String,
        label: i64,
        class_count: usize,
    },

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("class {class} has only {count} members; at least 3 required")]
    ClassTooSmall { class: usize, count: usize },

    #[error("empty sequence at batch position {0}")]
    EmptySequence(usize),

    #[error("empty word cannot be embedded")]
    EmptyWord,

    #[error("empty token list")]
    EmptyTokens,

    #[error("vector file line {line}: expected {expected} values, found {found}")]
    VectorDim {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("KG schema violation at {pointer}: {reason}")]
    KgSchema { pointer: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("all positions masked in {0}")]
    AllMasked(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("probability {value} at index {index} is not positive")]
    NonPositiveProbability { index: usize, value: f64 },

    #[error("empty sweep grid")]
    EmptyGrid,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
