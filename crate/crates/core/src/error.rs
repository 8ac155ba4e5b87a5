//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("duplicate capsule id: {id}")]
    DuplicateCapsuleId { id: String },

    #[error("dangling provenance, sentence ids not found: {}", ids.join(", "))]
    DanglingProvenance { ids: Vec<String> },

    #[error("unknown capsule id: {id}")]
    UnknownCapsuleId { id: String },

    #[error("entity not found in graph: {entity}")]
    EntityNotFound { entity: String },

    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },

    #[error("position overflow: need {needed} positions but model allows {max}")]
    PositionOverflow { needed: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("KV bank entry not found: {id}")]
    MissingEntry { id: String },

    #[error("model fingerprint mismatch: bank was compiled with {expected}, live model is {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
