use thiserror::Error;

/// Failure classes of a run, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("positivity margin {margin:.3e} at or below {threshold} after raising t to {t}")]
    Positivity { margin: f64, threshold: f64, t: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Positivity { .. } => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => 1,
        }
    }
}

impl From<bslab_core::Error> for CliError {
    fn from(e: bslab_core::Error) -> Self {
        use bslab_core::Error as E;
        match e {
            E::Invalid(m) => CliError::Validation(m),
            E::Cap { .. } => CliError::Validation(e.to_string()),
            E::Positivity { margin, threshold } => CliError::Positivity { margin, threshold, t: f64::NAN },
            E::TooFewValues { .. } | E::Numerical(_) => CliError::Numerical(e.to_string()),
            E::Io(e) => CliError::Io(e),
            E::Csv(e) => CliError::Csv(e),
            E::Json(e) => CliError::Json(e),
        }
    }
}
