use thiserror::Error;

use crate::numerics::LinalgError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("need at least {needed} points, got {available}")]
    TooFewPoints { needed: usize, available: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("non-finite objective at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("train-mode batch normalisation needs at least 2 rows, got {size}")]
    BatchTooSmall { size: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error("{set}: {source}")]
    InTestSet {
        set: String,
        #[source]
        source: Box<Error>,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: expected {expected} values, found {actual}")]
    LineDimensionMismatch { line: usize, expected: usize, actual: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("example {id} has no secondary label")]
    MissingSecondaryLabel { id: String },
    #[error("split fractions must lie in (0, 1) and sum to less than 1, got {val} and {test}")]
    FractionOverflow { val: f64, test: f64 },
    #[error("the inconsistent test set is empty")]
    InconsistentSetEmpty,
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches a file path to an error.
    pub fn in_file(self, path: impl AsRef<std::path::Path>) -> Self {
        Error::File { path: path.as_ref().display().to_string(), source: Box::new(self) }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch { expected: expected.to_string(), actual: actual.to_string() }
    }
}
