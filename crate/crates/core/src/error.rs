use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
    #[error("example `{0}` has a non-finite feature value")]
    NonFinite(String),
    #[error("training set contains a single class")]
    SingleClass,
    #[error("non-finite gradient at epoch {epoch}, batch {batch}")]
    NonFiniteGradient { epoch: usize, batch: usize },
    #[error("covariance of component {component} is not positive definite")]
    CovarianceCollapse { component: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("scores have zero spread; no bandwidth can be chosen")]
    ZeroVariance,
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Whether the error stems from bad input or configuration rather than a
    /// failure while computing.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Invalid(_)
            | Error::DimensionMismatch { .. }
            | Error::DuplicateId(_)
            | Error::NonFinite(_)
            | Error::UnknownMethod(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
