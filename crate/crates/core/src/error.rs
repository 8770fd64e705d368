use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is indefinite (eigenvalue {0:e})")]
    Indefinite(f64),

    #[error("truth model generation failed after {0} consecutive CPTP rejections")]
    GenerationFailure(usize),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stream does not match design: {0}")]
    StreamMismatch(String),

    #[error("data corruption: {0}")]
    DataCorruption(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures that stem from the numbers rather than from the
    /// caller's inputs or the filesystem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Indefinite(_) | Error::GenerationFailure(_) | Error::Simulation(_) | Error::Numerical(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
