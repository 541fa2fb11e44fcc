use std::path::PathBuf;

use thiserror::Error;

use crate::taxonomy::Status;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("unknown component type `{0}`")]
    UnknownComponentType(String),
    #[error("duplicate category `{0}`")]
    DuplicateCategory(String),
    #[error("duplicate component type `{0}`")]
    DuplicateComponentType(String),
    #[error("component type `{component_type}` has more than one {status:?} category")]
    DuplicateTypeStatus { component_type: String, status: Status },
    #[error("external-interference category `{0}` must have defect status")]
    ExternalNotDefect(String),
    #[error("external-interference type `{0}` must have exactly one category")]
    ExternalCategoryCount(String),
}

#[derive(Debug, Error)]
pub enum CurationError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("template `{0}` has no `{{}}` placeholder")]
    TemplatePlaceholder(String),
    #[error("alt-text pool has no entries for category `{0}`")]
    EmptyPool(String),
    #[error("annotation {index} has zero area")]
    DegenerateBox { index: usize },
    #[error("annotation {index} lies outside the {width}x{height} image")]
    BoxOutOfBounds { index: usize, width: u32, height: u32 },
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest is empty (missing header record)")]
    MissingHeader,
    #[error("record {record}: malformed json: {source}")]
    Json {
        record: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported manifest version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: String },
    #[error("record {record}: unknown category `{category}`")]
    UnknownCategory { record: usize, category: String },
    #[error("record {record}: image `{path}` does not exist")]
    MissingImage { record: usize, path: PathBuf },
    #[error("record {record}: empty alt-text")]
    EmptyAltText { record: usize },
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("could not place object {placed_so_far} of {requested} after {attempts} attempts")]
    Placement {
        requested: usize,
        placed_so_far: usize,
        attempts: usize,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    BoxesFile { path: PathBuf, line: usize, msg: String },
}

#[derive(Debug, Error)]
pub enum CropError {
    #[error("invalid crop spec: {0}")]
    Spec(String),
    #[error("defect region {0:?} is empty or outside the image")]
    Region((u32, u32, u32, u32)),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("detection on image `{image}` uses non-defect category `{category}`")]
    NotADefect { image: String, category: String },
}
