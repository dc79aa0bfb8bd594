use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {num_classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("zero-norm row {row} in {what}")]
    ZeroNorm { what: String, row: usize },

    #[error("class {class} has {available} examples, {requested} requested")]
    InsufficientExamples {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical failure in {what}: {detail}")]
    Numerical { what: String, detail: String },

    #[error("output directory {0} already exists (use --force)")]
    OutputExists(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn numerical(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 for data/validation errors, 3 for
    /// numerical failures. Usage errors (1) are raised by argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 3,
            _ => 2,
        }
    }
}
