use std::path::PathBuf;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty location set")]
    EmptyLocations,

    #[error("coordinate dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("location {index} has a non-finite coordinate")]
    NonFiniteCoordinate { index: usize },

    #[error("level {level}: rows {first} and {second} share the same location")]
    DuplicateLocation {
        level: usize,
        first: usize,
        second: usize,
    },

    #[error("{what}: expected length {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("neighbor covariance of site {index} is not positive definite")]
    NotPositiveDefinite { index: usize },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("dense computation of size {size} exceeds the cap of {cap}")]
    SizeCap { size: usize, cap: usize },

    #[error("non-finite log-density term: {0}")]
    NonFiniteTerm(String),

    #[error("empty trace")]
    EmptyTrace,

    #[error("iteration {iter}: {source}")]
    Iteration {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for errors caused by bad input rather than numerical failure.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::Factorization(_)
            | Error::NonFiniteTerm(_) => false,
            Error::Iteration { source, .. } => source.is_user_error(),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
