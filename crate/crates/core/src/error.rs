use crate::optimizer::MetricsRecord;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate sketch matrix")]
    DegenerateSketch,

    #[error("indefinite matrix (pivot {pivot} = {value:e})")]
    Indefinite { pivot: usize, value: f64 },

    #[error("sketch not PSD: {0}")]
    SketchNotPsd(Box<Error>),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("diagnostic matrix too large: {what} has size {size}, cap is {cap}")]
    TooLarge {
        what: &'static str,
        size: usize,
        cap: usize,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch size {batch} exceeds sample count {n}")]
    BatchTooLarge { batch: usize, n: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("learning-rate estimation failed (lambda = {0:e})")]
    LearningRate(f64),

    #[error("divergence detected at iteration {iteration}")]
    Divergence {
        iteration: usize,
        partial: Vec<MetricsRecord>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
