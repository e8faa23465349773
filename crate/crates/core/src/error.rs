use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dense limit exceeded: n = {n} > {limit}")]
    DenseLimit { n: usize, limit: usize },

    #[error("matrix is not positive definite at {location}; decrease eps or increase the nugget")]
    NotPositiveDefinite { location: String },

    #[error("admissibility violated: {0}")]
    Admissibility(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("iteration {iter}: {source}")]
    AtIteration {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("csv input: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_iteration(self, iter: usize) -> Error {
        Error::AtIteration {
            iter,
            source: Box::new(self),
        }
    }
}
