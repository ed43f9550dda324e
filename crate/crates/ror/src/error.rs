//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RorError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("expression produced no usable tokens")]
    EmptyExpression,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} in {term}")]
    NonFiniteLoss { step: usize, term: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl RorError {
    /// Shorthand for the pervasive "expected these dims, got those" case.
    pub fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        RorError::Shape {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        RorError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for RorError {
    fn from(e: serde_json::Error) -> Self {
        RorError::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for RorError {
    fn from(e: toml::de::Error) -> Self {
        RorError::Config(e.to_string())
    }
}
