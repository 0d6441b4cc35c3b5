use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Background segment has (numerically) zero spread.
    #[error("degenerate background: standard deviation {sigma:e} is not above {eps:e}")]
    DegenerateBackground { sigma: f64, eps: f64 },

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("no frequency bins in [{lo} Hz, {hi} Hz]")]
    EmptyRange { lo: f64, hi: f64 },

    #[error("unsupported filter axis: {0}")]
    UnsupportedAxis(String),

    #[error("class {class} has {count} trials, need at least {k} for {k}-fold split")]
    TooFewTrials { class: usize, count: usize, k: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
