use thiserror::Error;

/// Errors raised anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum FlodeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numerical failure in {step}: {detail}")]
    Numerical { step: &'static str, detail: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FlodeError {
    pub(crate) fn numerical(step: &'static str, detail: impl Into<String>) -> Self {
        FlodeError::Numerical {
            step,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FlodeError>;
