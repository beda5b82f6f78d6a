use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward already ran on this graph; reset gradients before calling it again")]
    BackwardTwice,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("gradient reached frozen parameter {0}")]
    FrozenGradient(String),

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{phase} diverged at epoch {epoch}: loss is {loss}")]
    Divergence { phase: &'static str, epoch: usize, loss: f64 },

    #[error("teacher parameters changed during compression")]
    TeacherMutated,

    #[error("incremental step {step} failed: {source}")]
    Step { step: usize, source: Box<Error> },

    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io(path.into(), err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
