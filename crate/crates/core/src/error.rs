//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor shapes do not line up for an operation. The message names both shapes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value is out of its legal range.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// An operation precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid user-supplied data (prompt fields, records, CLI inputs).
    #[error("validation error: {0}")]
    Validation(String),

    /// A serialized record does not match the expected schema.
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    /// Checkpoint or dataset blob is unreadable or inconsistent.
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged (NaN/Inf loss) with enough context to replay the batch.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CoreError {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    /// The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            CoreError::Configuration(_)
                | CoreError::Validation(_)
                | CoreError::Schema { .. }
                | CoreError::Dimension { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
