use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("timestep {t} out of range [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("alpha_bar {0:e} too small to invert")]
    Degenerate(f64),

    #[error("unknown label {label} (num_labels = {num_labels})")]
    UnknownLabel { label: u32, num_labels: usize },

    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(u8),

    #[error("classifier expects 32x32 spatial input, got {0}x{1}")]
    WrongSpatialSize(usize, usize),

    #[error("{dim} = {value} is not divisible by {factor}")]
    Divisibility { dim: &'static str, value: usize, factor: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("model parameters not loaded: {0}")]
    Unloaded(String),

    #[error("at iteration {iteration}: {source}")]
    AtIteration {
        iteration: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
