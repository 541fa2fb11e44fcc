use std::path::PathBuf;

use linevlp_core::{CropError, ManifestError, TaxonomyError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("non-finite loss in {stage} at epoch {epoch}, step {step}; batch indices {batch:?}")]
    NumericFailure {
        stage: String,
        epoch: usize,
        step: usize,
        batch: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;
