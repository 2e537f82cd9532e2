use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DeltError>;

#[derive(Debug, Error)]
pub enum DeltError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("not a distilled dataset: {}", .0.display())]
    NotADataset(PathBuf),

    #[error("batch-to-global matching requires normalization statistics")]
    MissingBatchNorm,

    #[error("batch statistics need at least 2 images, got {0}")]
    BatchTooSmall(usize),

    #[error("pool exhausted: class {class_id} has {available} patches, {requested} requested")]
    PoolExhausted {
        class_id: usize,
        available: usize,
        requested: usize,
    },

    #[error("class {0} has no training images")]
    EmptyClass(usize),

    #[error("last sub-batch has no iterations: max_iterations {max_iterations} <= (M-1)*RI = {consumed}")]
    EmptyLastSubbatch { max_iterations: usize, consumed: usize },

    #[error("iteration {t} out of range [0, {max_iterations})")]
    IterationOutOfRange { t: usize, max_iterations: usize },

    #[error("BN layer {layer}: dimension mismatch ({detail})")]
    BnDimension { layer: usize, detail: String },

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl DeltError {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            DeltError::Config(_)
                | DeltError::Validation(_)
                | DeltError::EmptyLastSubbatch { .. }
                | DeltError::UnknownArchitecture(_)
        )
    }
}
