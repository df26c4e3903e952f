use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { context: &'static str, expected: Vec<usize>, found: Vec<usize> },

    #[error("{context}: expected a rank-{expected} tensor, found rank {found}")]
    Rank { context: &'static str, expected: usize, found: usize },

    #[error("{0}: matrix is not square")]
    NotSquare(&'static str),

    #[error("{context}: matrix is not symmetric (defect {defect:e})")]
    Asymmetric { context: &'static str, defect: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} of size {size} exceeds the configured cap of {cap}")]
    CapExceeded { what: String, size: usize, cap: usize },

    #[error("missing cache: {0}")]
    MissingCache(&'static str),

    #[error("data format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
