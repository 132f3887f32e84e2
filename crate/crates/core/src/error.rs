use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("circulant embedding has a negative eigenvalue {value:e} at index {index}")]
    NegativeEigenvalue { index: usize, value: f64 },

    #[error("matrix is not realizable in {dim} dimensions: {reason} (spectrum: {spectrum:?})")]
    NotRealizable {
        dim: usize,
        reason: String,
        spectrum: Vec<f64>,
    },

    #[error("singular value decomposition did not converge at iteration {iteration}")]
    SvdFailure { iteration: usize },

    #[error("non-finite value encountered at step {step}: {context}")]
    NonFinite { step: usize, context: String },

    #[error("covariance square root failed; spectrum: {spectrum:?}")]
    SqrtFailure { spectrum: Vec<f64> },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("no known entries to complete from")]
    NoKnownEntries,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
