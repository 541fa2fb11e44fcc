//! Line-delimited JSON manifest of image-text pairs.
//!
//! Record 0 is the header `{version, taxonomy, provenance?}`; every following
//! line is one [`InstanceSample`]. Image paths are relative to the manifest's
//! directory.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curation::InstanceSample;
use crate::error::ManifestError;
use crate::taxonomy::Taxonomy;

pub const MANIFEST_VERSION: &str = "linevlp-manifest/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub taxonomy: Taxonomy,
    pub samples: Vec<InstanceSample>,
    /// Hash of the configuration and inputs that produced this manifest.
    pub provenance: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    taxonomy: Taxonomy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

impl Manifest {
    pub fn new(taxonomy: Taxonomy) -> Self {
        Self {
            version: MANIFEST_VERSION.to_string(),
            taxonomy,
            samples: Vec::new(),
            provenance: None,
        }
    }

    /// Serialized form; identical inputs give identical bytes.
    pub fn to_lines(&self) -> String {
        let header = Header {
            version: self.version.clone(),
            taxonomy: self.taxonomy.clone(),
            provenance: self.provenance.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    /// Checks every sample's category and alt-text (record numbers start at 1).
    pub fn validate(&self) -> Result<(), ManifestError> {
        for (i, s) in self.samples.iter().enumerate() {
            let record = i + 1;
            if self.taxonomy.id(&s.category).is_err() {
                return Err(ManifestError::UnknownCategory {
                    record,
                    category: s.category.clone(),
                });
            }
            if s.alt_text.trim().is_empty() {
                return Err(ManifestError::EmptyAltText { record });
            }
        }
        Ok(())
    }

    pub fn resolve_image(base: &Path, image_ref: &str) -> PathBuf {
        let p = Path::new(image_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

pub fn save_manifest(m: &Manifest, path: &Path) -> Result<(), ManifestError> {
    let io = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(m.to_lines().as_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

/// Loads and validates a manifest, including existence of every image file.
pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let m = load_manifest_unchecked(path)?;
    m.validate()?;
    let base = path.parent().unwrap_or(Path::new(""));
    for (i, s) in m.samples.iter().enumerate() {
        let p = Manifest::resolve_image(base, &s.image_ref);
        if !p.is_file() {
            return Err(ManifestError::MissingImage { record: i + 1, path: p });
        }
    }
    Ok(m)
}

/// Parses a manifest without touching the image files.
pub fn load_manifest_unchecked(path: &Path) -> Result<Manifest, ManifestError> {
    let io = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut lines = reader.lines().enumerate();

    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(io)?;
            serde_json::from_str(&line).map_err(|source| ManifestError::Json { record: 0, source })?
        }
        None => return Err(ManifestError::MissingHeader),
    };
    if header.version != MANIFEST_VERSION {
        return Err(ManifestError::Version {
            found: header.version,
            expected: MANIFEST_VERSION.to_string(),
        });
    }

    let mut samples = Vec::new();
    for (record, line) in lines {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let s: InstanceSample =
            serde_json::from_str(&line).map_err(|source| ManifestError::Json { record, source })?;
        samples.push(s);
    }
    let m = Manifest {
        version: header.version,
        taxonomy: header.taxonomy,
        samples,
        provenance: header.provenance,
    };
    m.validate()?;
    Ok(m)
}
