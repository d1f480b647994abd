use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: expected ({0}, {1}), got ({2}, {3})")]
    ShapeMismatch(usize, usize, usize, usize),

    #[error("negative weight {value} at index {index}")]
    NegativeWeight { index: usize, value: f64 },

    #[error("weights sum to zero")]
    ZeroMass,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("instance too large for the exact solver: {n}x{m} exceeds {limit} cells")]
    TooLarge { n: usize, m: usize, limit: usize },

    #[error("class {0} is not present in the batch")]
    ClassAbsent(usize),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("class {class} has {have} rows, at least {need} required")]
    InsufficientClass { class: usize, have: usize, need: usize },

    #[error("could not place {classes} class means in {dim} dimensions after {attempts} attempts")]
    RejectionFailed { classes: usize, dim: usize, attempts: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("sinkhorn did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit status: 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Diverged { .. } | Error::NotConverged { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::Config { key: key.to_string(), reason: reason.into() }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
