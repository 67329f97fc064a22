use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("{op}: reduction over an empty set")]
    EmptyReduction { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0}")]
    NotScalar(Shape),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("function is not deterministic: two forward passes disagree")]
    NonDeterministic,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("loss mode {0} requires semantic labels but none were supplied")]
    MissingSemantics(&'static str),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerical pipeline (non-finite values,
    /// failed determinism), as opposed to bad input data or usage.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonDeterministic)
    }

    /// True for problems with files on disk or their contents.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Format { .. } | Error::Io { .. } | Error::Manifest(_) | Error::Checkpoint(_)
        )
    }
}
