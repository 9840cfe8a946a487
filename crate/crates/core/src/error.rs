use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),

    #[error("not a rotation matrix: {0}")]
    NotARotation(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("body mesh is not watertight: {inconsistent} of {total} grid cells disagree on inside/outside")]
    NonWatertightBody { inconsistent: usize, total: usize },

    #[error("unknown joint `{0}`")]
    UnknownJoint(String),

    #[error("degenerate camera `{0}`: position coincides with look-at target")]
    DegenerateCamera(String),

    #[error("vision-language service unavailable: {0}")]
    ServiceUnavailable(String),

    #[error("vision-language service protocol error: {0}")]
    ServiceProtocolError(String),

    #[error("embedding width mismatch: expected {expected}, got {got}")]
    EmbeddingWidthMismatch { expected: usize, got: usize },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("no training data: {0}")]
    DataEmpty(String),

    #[error("training diverged: {0}")]
    DivergenceDetected(String),

    #[error("semantic backend `{0}` cannot provide gradients")]
    BackendNotDifferentiable(String),

    #[error("character pair mismatch: {0}")]
    PairMismatch(String),

    #[error("schema violation in {context}: {message}")]
    SchemaViolation { context: String, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn schema(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::SchemaViolation {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (files, flags, configs) rather
    /// than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::SchemaViolation { .. }
                | Error::InvalidConfig(_)
                | Error::UnknownJoint(_)
                | Error::PairMismatch(_)
                | Error::NotARotation(_)
                | Error::Io { .. }
        )
    }
}
