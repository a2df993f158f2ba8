use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} needs {expected} elements, got {got}")]
    InvalidTensor {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("tape already consumed by a backward pass; call reset() before reuse")]
    TapeConsumed,

    #[error("unknown tape node {0}")]
    UnknownNode(usize),

    #[error("non-finite value in {context}{}", index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    NonFinite {
        context: String,
        index: Option<usize>,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("timestep bin {bin} outside [0, {max}]")]
    BinOutOfRange { bin: usize, max: usize },

    #[error("cannot convert prediction at bin {bin}: {which} is zero")]
    DegenerateBin { bin: usize, which: &'static str },

    #[error("conditional model requires a label for every sample")]
    MissingLabel,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("lineage mismatch: paired dataset built from teacher {expected:016x}, got teacher {got:016x}")]
    LineageMismatch { expected: u64, got: u64 },

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
