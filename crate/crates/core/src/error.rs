use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schedule error: epoch {epoch} outside 0..={total}")]
    Schedule { epoch: usize, total: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (seg={seg_loss}, cls={cls_loss})")]
    NonFinite {
        epoch: usize,
        step: usize,
        seg_loss: f64,
        cls_loss: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("cannot read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// True for failures of the run itself (divergence, bad data) as opposed
    /// to malformed configuration or usage.
    pub fn is_runtime_abort(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
