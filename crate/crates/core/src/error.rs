use std::path::PathBuf;

use thiserror::Error;

use crate::types::{CategoryId, Violation};

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed metadata at {path}: {message}")]
    MalformedMeta { path: String, message: String },

    #[error("segment map image not found: {0}")]
    MissingMap(PathBuf),

    #[error("cannot decode segment map {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("annotation for image {image_id} failed validation: {}", summarize(.violations))]
    Validation {
        image_id: u64,
        violations: Vec<Violation>,
    },

    #[error("invalid category registry: {0}")]
    Registry(String),

    #[error("invalid removal ratio {0}% (expected 5, 10 or 20)")]
    InvalidRatio(u32),

    #[error("category {0} is not in the registry")]
    UnknownCategory(CategoryId),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        found: (u32, u32),
    },

    #[error("proposal {index} is missing {what}")]
    MissingScore { index: usize, what: &'static str },

    #[error("strategy {0} requires an auxiliary class index")]
    MissingAuxIndex(&'static str),

    #[error("empty batch: no {0} proposals")]
    EmptyBatch(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Joins at most the first ten violations into one line.
fn summarize(violations: &[Violation]) -> String {
    let mut parts: Vec<String> = violations.iter().take(10).map(|v| v.to_string()).collect();
    if violations.len() > 10 {
        parts.push(format!("... and {} more", violations.len() - 10));
    }
    parts.join("; ")
}
