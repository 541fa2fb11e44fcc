//! Models and training for transmission-line vision-language pretraining:
//! dual encoders, the contrastive, relation and defect-normal objectives,
//! progressive transfer, and a dense detector on the pretrained backbone.

pub mod detector;
pub mod encoders;
pub mod error;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tokenizer;

pub use error::{ModelError, Result};
