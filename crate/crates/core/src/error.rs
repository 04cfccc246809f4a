use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("linear initializer has not been fitted")]
    NotFitted,

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("fidelity term kind mismatch: expected {expected}, got {got}")]
    WrongFidelity { expected: &'static str, got: &'static str },

    #[error("instance norm needs at least 2 spatial samples, got {0}")]
    DegenerateStatistics(usize),

    #[error("framework `{framework}` does not support {reason}")]
    UnsupportedFramework {
        framework: &'static str,
        reason: &'static str,
    },

    #[error("non-finite value at unrolled iteration {iteration}")]
    NumericalDivergence { iteration: usize },

    #[error("unsupported primitive `{0}`")]
    UnsupportedOp(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    TrainingDivergence { epoch: usize, step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::InvalidDimension(msg.into())
}
