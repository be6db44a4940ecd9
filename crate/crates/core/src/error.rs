//! Shared error type for the library.

use thiserror::Error;

/// Errors produced by library operations.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A trace solution is empty or whitespace-only where a non-empty one is required.
    #[error("empty trace: solution has no content")]
    EmptyTrace,

    /// A scalar argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Not enough data points to compute the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A model configuration violates a structural invariant.
    #[error("invalid model config: {0}")]
    Config(String),

    /// A token sequence exceeds the model's maximum length.
    #[error("sequence length {got} exceeds maximum {max}")]
    Length { got: usize, max: usize },

    /// A vector or tensor has the wrong dimensionality.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// A serialized container is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Declared payload sizes disagree with the actual file contents.
    #[error("checksum error: {0}")]
    Checksum(String),

    /// A container declares a format version this build does not understand.
    #[error("unsupported format version {0}")]
    Version(u32),

    /// A steering vector was extracted from different weights than the active model.
    #[error("model fingerprint mismatch: vector from {vector}, model is {model}")]
    FingerprintMismatch { vector: String, model: String },

    /// An operation over a collection received no elements.
    #[error("empty set: {0}")]
    EmptySet(String),

    /// Pair construction ran out of usable questions before reaching the target count.
    #[error("insufficient pairs: needed {needed}, built {built} before exhausting the pool")]
    InsufficientPairs { needed: usize, built: usize },

    /// The rewriter endpoint could not be reached after retries.
    #[error("network error: {0}")]
    Network(String),

    /// The external rewriter returned a blank completion.
    #[error("rewriter returned an empty response")]
    EmptyResponse,

    /// Offline mode was requested but the response cache has no entry.
    #[error("cache miss in offline mode: {0}")]
    CacheMiss(String),

    /// A dataset line could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A gsm8k-format answer field has no final-answer marker.
    #[error("missing gold marker '#### ' at line {line}")]
    MissingGold { line: usize },

    /// A sweep was requested over an empty grid.
    #[error("empty sweep grid")]
    EmptyGrid,

    /// An error attributable to one pair of a contrastive set.
    #[error("pair {index}: {source}")]
    Pair {
        index: usize,
        #[source]
        source: Box<CoreError>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
