use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input at index {index}: {reason}")]
    InvalidInput { index: usize, reason: String },

    #[error("invalid input for pair ({p}, {q}): {source}")]
    PairInput {
        p: usize,
        q: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("negative divergence {value:e} below the numerical floor")]
    NegativeDivergence { value: f64 },

    #[error("training did not converge: no descent step found (stress {stress:e})")]
    NonConvergence { stress: f64 },

    #[error("ICA did not converge after {iterations} iterations (last delta {delta:e})")]
    IcaNonConvergence { iterations: usize, delta: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(index: usize, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            index,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
