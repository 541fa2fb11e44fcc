use std::path::PathBuf;

use linevlp_core::{CropError, CurationError, EvalError, ManifestError, SynthError, TaxonomyError};
use linevlp_model::ModelError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` needs {what} at {}; run `{needs}` first", path.display())]
    Dependency {
        stage: &'static str,
        needs: &'static str,
        what: &'static str,
        path: PathBuf,
    },
    #[error("provenance mismatch in {}: {msg}", path.display())]
    Provenance { path: PathBuf, msg: String },
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: line {line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Param(msg) => CliError::Config(msg),
            other => CliError::Model(other),
        }
    }
}

impl CliError {
    /// 0 ok, 1 other failure, 2 config, 3 stage dependency, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } | CliError::Provenance { .. } => 3,
            CliError::Model(ModelError::NumericFailure { .. }) => 4,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
