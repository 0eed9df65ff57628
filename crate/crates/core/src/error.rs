use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("k = {k} exceeds the {available} available candidates")]
    TooFewCandidates { k: usize, available: usize },

    #[error("duplicate class identifier `{0}`")]
    DuplicateClass(String),

    #[error("unknown class identifier `{0}`")]
    UnknownClass(String),

    #[error("row of class `{0}` has zero weight sum")]
    ZeroRowSum(String),

    #[error("stationary distribution did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("propagation system is singular or ill-conditioned (alpha = {alpha}, spectral radius of theta ~ {spectral_radius:.6}, condition ~ {condition:e})")]
    IllConditioned {
        alpha: f64,
        spectral_radius: f64,
        condition: f64,
    },

    #[error("seen class `{0}` has no training rows")]
    EmptyClass(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("fold {fold}, stage `{stage}`: {source}")]
    Stage {
        fold: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Attach fold index and pipeline stage.
    pub fn at_stage(self, fold: usize, stage: &'static str) -> Self {
        Error::Stage {
            fold,
            stage,
            source: Box::new(self),
        }
    }
}
