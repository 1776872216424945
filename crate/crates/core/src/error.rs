use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CraError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Image or mask dimensions violate the multiple-of-network-size rule.
    #[error("dimension violation: {0}")]
    Dimension(String),

    #[error("mask has no context cells; attention needs at least one valid patch")]
    EmptyContext,

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("no adjoint registered for op `{0}`")]
    UnregisteredOp(&'static str),

    #[error("loss must be a scalar, got shape {0}")]
    NotScalar(String),

    #[error("architecture parse error: {0}")]
    Arch(String),

    #[error("weight container error: {0}")]
    Container(String),

    #[error("weights do not match architecture: {0}")]
    WeightMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("training: {0}")]
    Training(String),

    /// A checked property of a computation did not hold.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T, E = CraError> = std::result::Result<T, E>;

impl CraError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CraError::Io {
            path: path.into(),
            source,
        }
    }
}
