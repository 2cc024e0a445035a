use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("fully masked distribution")]
    FullyMasked,

    #[error("need {kappa} retrievable items but only {available} are unmasked")]
    InsufficientItems { kappa: usize, available: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite gradient in parameter group `{group}` (parameter `{param}`)")]
    NonFiniteGradient { group: String, param: String },

    #[error("non-finite {what} at step {step}")]
    NonFiniteLoss { what: &'static str, step: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("record {index}: {reason}")]
    InconsistentRecord { index: u64, reason: String },

    #[error("index {index} out of range for corpus of {len} records")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("corrupt corpus file {path}: {reason}")]
    CorruptCorpus { path: PathBuf, reason: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("disk full while writing {path}")]
    DiskFull { path: PathBuf },

    #[error("memory budget for `{tag}` exceeded: {requested} bytes requested with {live} live, budget {budget}")]
    BudgetExceeded {
        tag: &'static str,
        requested: usize,
        live: usize,
        budget: usize,
    },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Whether this error stems from user-supplied configuration rather than
    /// a runtime or numeric failure.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::InvalidArgument(_))
    }
}
