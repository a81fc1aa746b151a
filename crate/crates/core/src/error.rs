//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Two vectors (or a vector and a model) that must share a dimension do not.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A compressor spec with an out-of-range or missing parameter.
    #[error("invalid compressor spec: {0}")]
    InvalidSpec(String),

    /// A config field failed validation. `field` is a path like
    /// `experiment[1].iterations`.
    #[error("invalid config at `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    /// A compressed message whose payload is internally inconsistent.
    #[error("malformed payload: {0}")]
    MalformedPayload(String),

    /// An analysis checker was handed a trajectory it cannot evaluate.
    #[error("incomplete trajectory: {0}")]
    IncompleteTrajectory(String),

    /// Metrics-level operation on an empty run.
    #[error("empty metrics")]
    EmptyMetrics,
}

impl Error {
    pub fn invalid_config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
