use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{what} count {count} exceeds cap {cap}")]
    Cap { what: &'static str, count: usize, cap: usize },
    #[error("positivity margin {margin:.3e} below threshold {threshold:.3e}")]
    Positivity { margin: f64, threshold: f64 },
    #[error("too few usable values: {found} < {required}")]
    TooFewValues { found: usize, required: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
