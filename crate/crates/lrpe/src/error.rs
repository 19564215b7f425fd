use crate::equilibrium::IterationTrace;

/// Error type shared across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("iteration diverged at stage {stage}")]
    Divergence { stage: usize, trace: IterationTrace },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing checkpoint for method {0}")]
    MissingCheckpoint(String),
}

impl Error {
    /// Stable machine-readable error kind, used for the CLI's error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Geometry(_) => "geometry",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Parameter(_) => "parameter",
            Error::NonFinite(_) => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
