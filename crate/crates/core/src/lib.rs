//! Data side of transmission-line vision-language pretraining: the component
//! taxonomy, alt-text curation, manifests, procedural scenes, context crops
//! for progressive transfer, and detection metrics.

pub mod crops;
pub mod curation;
pub mod error;
pub mod geometry;
pub mod manifest;
pub mod metrics;
pub mod probe;
pub mod synthetic;
pub mod taxonomy;

pub use error::{CropError, CurationError, EvalError, ManifestError, SynthError, TaxonomyError};
pub use geometry::{iou, nms, BBox, Detection};
pub use taxonomy::{Category, CategoryId, ComponentType, Relation, Status, Taxonomy};
