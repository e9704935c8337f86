use thiserror::Error;

/// Errors raised by estimation, testing, simulation and I/O.
#[derive(Debug, Error)]
pub enum MkqrError {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: &'static str,
    },

    #[error("design matrix is rank deficient at column {column}")]
    SingularDesign { column: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MkqrError {
    /// Process exit code used by the command-line interface.
    pub fn exit_code(&self) -> i32 {
        match self {
            MkqrError::Validation(_)
            | MkqrError::DimensionMismatch { .. }
            | MkqrError::Schema { .. }
            | MkqrError::Io(_)
            | MkqrError::Json(_) => 2,
            MkqrError::Config(_) => 3,
            MkqrError::SingularDesign { .. } | MkqrError::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, MkqrError>;
