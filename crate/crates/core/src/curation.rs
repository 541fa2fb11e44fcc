//! Turning annotated images into image-text pairs.
//!
//! Three steps: crop annotated instances (keeping the category), build a
//! per-category alt-text pool from templates plus refined descriptions, and
//! pair each instance with a text drawn from its category's pool.

use std::collections::BTreeMap;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CurationError;
use crate::synthetic::DetectionScene;
use crate::taxonomy::{CategoryId, Taxonomy};

pub const PLACEHOLDER: &str = "{}";

pub const DEFAULT_TEMPLATES: [&str; 5] = [
    "There is a {} in the image.",
    "A photo of a {}.",
    "An aerial inspection image of a {}.",
    "A {} on the transmission line.",
    "This picture shows a {}.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Transition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSample {
    /// Path relative to the manifest's directory.
    pub image_ref: String,
    pub category: String,
    pub alt_text: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AltTextPool {
    pub entries: BTreeMap<String, Vec<String>>,
}

impl AltTextPool {
    pub fn texts(&self, category: &str) -> Result<&[String], CurationError> {
        match self.entries.get(category) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(CurationError::EmptyPool(category.to_string())),
        }
    }

    pub fn all_texts(&self) -> impl Iterator<Item = &str> {
        self.entries.values().flatten().map(String::as_str)
    }
}

/// Inspector-style refinements for the desk taxonomy.
pub fn desk_refined_descriptions() -> BTreeMap<String, Vec<String>> {
    let pairs: [(&str, &str); 6] = [
        ("grading_ring_damage", "A grading ring with a broken section detached from the insulator string."),
        ("shielded_ring_corrosion", "A rusted shielded ring on the aerial inspection image."),
        ("shockproof_hammer_intersection", "Two shockproof hammers are closely adjacent to each other."),
        ("insulator_bunch_drop", "An insulator string with a vacant position where a disc has dropped."),
        ("bird_nest", "A bird nest built on the tower near the line."),
        ("foreign_body", "A foreign body entangled on the conductor."),
    ];
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), vec![v.to_string()]))
        .collect()
}

pub fn build_alt_text_pool<S: AsRef<str>>(
    taxonomy: &Taxonomy,
    templates: &[S],
    refined: &BTreeMap<String, Vec<String>>,
) -> Result<AltTextPool, CurationError> {
    for t in templates {
        let t = t.as_ref();
        if !t.contains(PLACEHOLDER) {
            return Err(CurationError::TemplatePlaceholder(t.to_string()));
        }
    }
    for name in refined.keys() {
        taxonomy.id(name)?;
    }

    let mut entries = BTreeMap::new();
    for c in taxonomy.categories() {
        let mut texts: Vec<String> = Vec::new();
        let instantiated = templates
            .iter()
            .map(|t| t.as_ref().replacen(PLACEHOLDER, &c.display, 1));
        let extra = refined.get(&c.name).into_iter().flatten().cloned();
        for text in instantiated.chain(extra) {
            if !text.trim().is_empty() && !texts.contains(&text) {
                texts.push(text);
            }
        }
        if texts.is_empty() {
            return Err(CurationError::EmptyPool(c.name.clone()));
        }
        entries.insert(c.name.clone(), texts);
    }
    Ok(AltTextPool { entries })
}

/// Pairs each image with an alt-text drawn uniformly from its category's pool.
pub fn assign_alt_texts<R: Rng + ?Sized>(
    images: &[(String, CategoryId)],
    taxonomy: &Taxonomy,
    pool: &AltTextPool,
    split: Split,
    rng: &mut R,
) -> Result<Vec<InstanceSample>, CurationError> {
    images
        .iter()
        .map(|(image_ref, id)| {
            let category = &taxonomy.get(*id)?.name;
            let texts = pool.texts(category)?;
            let alt_text = texts[rng.random_range(0..texts.len())].clone();
            Ok(InstanceSample {
                image_ref: image_ref.clone(),
                category: category.clone(),
                alt_text,
                split,
            })
        })
        .collect()
}

/// One crop per annotated box, exactly the box extent.
pub fn crop_instances(scene: &DetectionScene) -> Result<Vec<(RgbImage, CategoryId)>, CurationError> {
    let (w, h) = scene.image.dimensions();
    scene
        .boxes
        .iter()
        .zip(&scene.labels)
        .enumerate()
        .map(|(index, (b, &label))| {
            let [x0, y0, x1, y1] = *b;
            if x1 <= x0 || y1 <= y0 {
                return Err(CurationError::DegenerateBox { index });
            }
            if x1 > w || y1 > h {
                return Err(CurationError::BoxOutOfBounds {
                    index,
                    width: w,
                    height: h,
                });
            }
            let crop = image::imageops::crop_imm(&scene.image, x0, y0, x1 - x0, y1 - y0).to_image();
            Ok((crop, label))
        })
        .collect()
}
