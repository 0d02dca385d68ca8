use thiserror::Error;

use crate::combine::SourceId;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum QifError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite linear predictor for participant {participant}")]
    NonFinitePredictor { participant: usize },

    #[error("degenerate fit: fitted mean {mean:e} for participant {participant} left the open unit interval")]
    DegenerateFit { participant: usize, mean: f64 },

    #[error(
        "{n} participants cannot support a {dim}-dimensional moment covariance; \
         reduce the basis (independence working structure) or pool cohorts"
    )]
    InsufficientSample { n: usize, dim: usize },

    #[error("singular Gauss-Newton step matrix at iteration {iteration}")]
    SingularStep { iteration: usize },

    #[error("logit link requires binary outcomes, found {value} for participant {participant}")]
    NonBinaryOutcome { participant: usize, value: f64 },

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("missing fit for source {0}")]
    MissingSource(SourceId),

    #[error(
        "weight matrix is singular (reciprocal condition {rcond:e}); \
         enable the PCA fallback (pca = \"when-singular\" or \"always\")"
    )]
    SingularWeight { rcond: f64 },

    #[error("singular information matrix: {0}")]
    SingularInformation(String),

    #[error("retained moment rank {rank} is below the parameter count {params}")]
    UnderIdentified { rank: usize, params: usize },

    #[error("inference: {0}")]
    Inference(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wire format: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
}

impl QifError {
    pub fn class(&self) -> ErrorClass {
        match self {
            QifError::Partition(_)
            | QifError::Config(_)
            | QifError::Format(_)
            | QifError::Io { .. }
            | QifError::MissingSource(_)
            | QifError::NonBinaryOutcome { .. }
            | QifError::Dimension(_)
            | QifError::InsufficientSample { .. } => ErrorClass::Config,
            _ => ErrorClass::Numerical,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        QifError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, QifError>;
