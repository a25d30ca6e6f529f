use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no scored pixels (every ground-truth label is the ignore sentinel)")]
    NoScoredPixels,

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("optimizer exhausted: iteration {iter} reached max_iters {max_iters}")]
    IterationsExhausted { iter: usize, max_iters: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
