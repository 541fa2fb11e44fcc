//! Command-line pipeline: synthetic data, vision-language pretraining, the
//! transition stage, detector training, evaluation and ablations.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod stages;

pub use config::{PipelineConfig, Preset};
pub use error::{CliError, Result};
