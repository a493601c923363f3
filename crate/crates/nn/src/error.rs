use thiserror::Error;

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{context}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{context}: expected rank {expected}, got shape {actual:?}")]
    Rank { context: String, expected: usize, actual: Vec<usize> },
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    DataLength { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },
    #[error("invalid layer spec: {0}")]
    Spec(String),
    #[error("{0}")]
    Invalid(String),
}
