use std::path::PathBuf;

/// Errors raised by the numerical routines, the tape, and the data loaders.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("dimension {dim} too small (need at least {min})")]
    DimensionTooSmall { dim: usize, min: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("singular matrix in linear solve (pivot {pivot} at column {col})")]
    Singular { col: usize, pivot: f64 },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("graph has not been evaluated")]
    NotEvaluated,

    #[error("expected {expected} domains, batch has {found}")]
    WrongDomainCount { expected: usize, found: usize },

    #[error("schema mismatch in {}: row {row}, column {col}: {detail}", path.display())]
    SchemaMismatch {
        path: PathBuf,
        row: usize,
        col: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
