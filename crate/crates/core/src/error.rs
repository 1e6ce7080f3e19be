use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{unit} value out of domain at row {row}, column {col}: {value}")]
    Domain {
        unit: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training of {layer} diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        layer: String,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("non-finite gradient in parameter group {group}")]
    NonFiniteGradient { group: String },

    #[error("view `{0}` is missing or has no data for the requested instances")]
    MissingView(String),

    #[error("unknown task kind `{0}`")]
    UnknownKind(String),

    #[error("invalid target for head `{head}`: {detail}")]
    Target { head: String, detail: String },

    #[error("threshold calibration failed: {0}")]
    Calibration(String),

    #[error("{}: row {row}: {detail}", path.display())]
    Data { path: PathBuf, row: usize, detail: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
