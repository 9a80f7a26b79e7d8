use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::MetricsRow;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Binary cache is malformed; `offset` is the byte position of the problem.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// CSV input is malformed; `row` is 1-based and counts the header line.
    #[error("parse error at row {row}: {message}")]
    Parse { row: u64, message: String },

    /// Noise calibration failed because the target cannot be met inside the
    /// searched noise-multiplier bracket.
    #[error(
        "target epsilon {target} not attainable: at the {endpoint} endpoint sigma = {sigma} gives epsilon = {epsilon}"
    )]
    Bracket {
        endpoint: &'static str,
        sigma: f64,
        epsilon: f64,
        target: f64,
    },

    #[error("state error: {0}")]
    State(String),

    /// Training produced a non-finite loss or parameter. `row` holds the
    /// diagnostic metrics of the failing step.
    #[error("non-finite value at step {}: {message}", row.step)]
    NonFinite {
        message: String,
        row: Box<MetricsRow>,
        completed: Vec<MetricsRow>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
