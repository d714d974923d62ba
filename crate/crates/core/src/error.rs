use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum DicError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("index out of range in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape has been cleared or already consumed by backward")]
    TapeCleared,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite loss at step {step} (lr {lr}, grad norm {grad_norm})")]
    NonFiniteLoss { step: u64, lr: f64, grad_norm: f64 },

    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DicError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DicError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DicError::Config { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn index(op: &'static str, detail: impl Into<String>) -> Self {
        DicError::Index { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DicError::Io { path: path.into(), source }
    }

    /// Short machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            DicError::Shape { .. } => "shape",
            DicError::Config { .. } => "config",
            DicError::UnknownKey(_) => "unknown_key",
            DicError::Index { .. } => "index",
            DicError::NonScalarLoss(_) => "non_scalar_loss",
            DicError::TapeCleared => "tape_cleared",
            DicError::Unsupported(_) => "unsupported",
            DicError::NonFiniteLoss { .. } => "non_finite_loss",
            DicError::Checkpoint { .. } => "checkpoint",
            DicError::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = DicError> = std::result::Result<T, E>;
