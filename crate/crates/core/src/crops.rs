//! Multiscale context crops around defect regions.
//!
//! For size index `s` with multipliers `(low, high)`, a crop of height in
//! `[low*h, high*h]` and width in `[low*w, high*w]` is taken inside the
//! `high*h x high*w` search region centred on the defect. The crop always
//! contains the whole defect box. Near image borders the search region is
//! clamped to the image, and when that leaves less than `low*h` the crop takes
//! the largest feasible size.

use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{assign_alt_texts, AltTextPool, Split};
use crate::error::CropError;
use crate::manifest::Manifest;
use crate::synthetic::DetectionScene;
use crate::taxonomy::{CategoryId, Status, Taxonomy};

pub const DEFAULT_BOUNDS: [(u32, u32); 5] = [(1, 3), (3, 5), (5, 7), (7, 9), (9, 11)];

/// Defect box as top-left corner plus height and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectRegion {
    pub x: u32,
    pub y: u32,
    pub h: u32,
    pub w: u32,
    pub category: CategoryId,
}

impl DefectRegion {
    pub fn from_corners(b: [u32; 4], category: CategoryId) -> Self {
        Self {
            x: b[0],
            y: b[1],
            w: b[2] - b[0],
            h: b[3] - b[1],
            category,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub n_sizes: usize,
    pub bounds: Vec<(u32, u32)>,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self::with_sizes(3)
    }
}

impl CropSpec {
    /// The first `n_sizes` default bounds.
    pub fn with_sizes(n_sizes: usize) -> Self {
        Self {
            n_sizes,
            bounds: DEFAULT_BOUNDS[..n_sizes.min(DEFAULT_BOUNDS.len())].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), CropError> {
        if !(1..=5).contains(&self.n_sizes) {
            return Err(CropError::Spec(format!("n_sizes {} outside 1..=5", self.n_sizes)));
        }
        if self.bounds.len() != self.n_sizes {
            return Err(CropError::Spec(format!(
                "{} bounds for {} sizes",
                self.bounds.len(),
                self.n_sizes
            )));
        }
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo < 1 || lo > hi {
                return Err(CropError::Spec(format!("bound {i} ({lo}, {hi}) is invalid")));
            }
            if let Some(&(next_lo, next_hi)) = self.bounds.get(i + 1) {
                if next_lo != hi || next_hi <= hi {
                    return Err(CropError::Spec(format!(
                        "bounds {i} and {} are not contiguous and increasing",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Pixel rectangle, top-left plus size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextCrop {
    pub image: RgbImage,
    pub rect: Rect,
    pub source_region: DefectRegion,
    pub size_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropPlan {
    pub rects: Vec<(usize, Rect)>,
    /// Set when the defect covers the whole image and one full-image crop is returned.
    pub full_image_fallback: bool,
}

/// 1-D placement of a window of `len` covering `[obj, obj + obj_len)` inside
/// the search interval centred on the object with length `search_len`,
/// clamped to `[0, limit)`. Returns (search_start, search_end).
fn search_interval(obj: u32, obj_len: u32, search_len: u32, limit: u32) -> (u32, u32) {
    let margin = search_len.saturating_sub(obj_len);
    let before = margin / 2;
    let start = obj.saturating_sub(before);
    let end = (obj as u64 + obj_len as u64 + (margin - before) as u64).min(limit as u64) as u32;
    (start, end)
}

fn sample_axis<R: Rng + ?Sized>(
    obj: u32,
    obj_len: u32,
    (lo, hi): (u32, u32),
    limit: u32,
    rng: &mut R,
) -> (u32, u32) {
    let (s0, s1) = search_interval(obj, obj_len, hi * obj_len, limit);
    let available = s1 - s0;
    let max_len = (hi * obj_len).min(available);
    let min_len = (lo * obj_len).min(max_len);
    let len = rng.random_range(min_len..=max_len);
    let first = s0.max((obj + obj_len).saturating_sub(len));
    let last = obj.min(s1 - len);
    (rng.random_range(first..=last), len)
}

/// Crop rectangles only; see [`sample_context_crops`].
pub fn plan_context_crops<R: Rng + ?Sized>(
    image_size: (u32, u32),
    region: &DefectRegion,
    spec: &CropSpec,
    rng: &mut R,
) -> Result<CropPlan, CropError> {
    spec.validate()?;
    let (img_w, img_h) = image_size;
    let r = region;
    if r.h == 0 || r.w == 0 || r.x + r.w > img_w || r.y + r.h > img_h {
        return Err(CropError::Region((r.x, r.y, r.w, r.h)));
    }
    if r.w >= img_w && r.h >= img_h {
        return Ok(CropPlan {
            rects: vec![(0, Rect { x: 0, y: 0, w: img_w, h: img_h })],
            full_image_fallback: true,
        });
    }
    let rects = spec
        .bounds
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let (y, h) = sample_axis(r.y, r.h, b, img_h, rng);
            let (x, w) = sample_axis(r.x, r.w, b, img_w, rng);
            (i, Rect { x, y, w, h })
        })
        .collect();
    Ok(CropPlan {
        rects,
        full_image_fallback: false,
    })
}

/// One context crop per configured size index.
pub fn sample_context_crops<R: Rng + ?Sized>(
    image: &RgbImage,
    region: &DefectRegion,
    spec: &CropSpec,
    rng: &mut R,
) -> Result<(Vec<ContextCrop>, bool), CropError> {
    let plan = plan_context_crops(image.dimensions(), region, spec, rng)?;
    let crops = plan
        .rects
        .into_iter()
        .map(|(size_index, rect)| ContextCrop {
            image: image::imageops::crop_imm(image, rect.x, rect.y, rect.w, rect.h).to_image(),
            rect,
            source_region: *region,
            size_index,
        })
        .collect();
    Ok((crops, plan.full_image_fallback))
}

/// Summary of a transition-set build.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransitionStats {
    pub scenes: usize,
    pub regions: usize,
    pub crops_added: usize,
    pub fallbacks: usize,
}

/// Appends context crops of every defect box to the pretraining samples.
///
/// Crops are written under `out_dir/context/` and referenced relative to
/// `out_dir`; pretraining image refs are re-rooted from `pretrain_dir`.
#[allow(clippy::too_many_arguments)]
pub fn build_transition_set<R: Rng + ?Sized>(
    scenes: &[(String, DetectionScene)],
    pretrain: &Manifest,
    pretrain_dir: &Path,
    pool: &AltTextPool,
    spec: &CropSpec,
    taxonomy: &Taxonomy,
    out_dir: &Path,
    rng: &mut R,
) -> Result<(Manifest, TransitionStats), CropError> {
    spec.validate()?;
    let mut out = pretrain.clone();
    for s in &mut out.samples {
        s.image_ref = rebase(pretrain_dir, out_dir, &s.image_ref);
    }
    let mut stats = TransitionStats {
        scenes: scenes.len(),
        ..Default::default()
    };
    if scenes.is_empty() {
        return Ok((out, stats));
    }

    let dir = out_dir.join("context");
    fs::create_dir_all(&dir).map_err(|source| CropError::Io { path: dir.clone(), source })?;
    for (name, scene) in scenes {
        let stem = name.trim_end_matches(".png");
        for (bi, (b, &label)) in scene.boxes.iter().zip(&scene.labels).enumerate() {
            if taxonomy.get(label)?.status != Status::Defect {
                continue;
            }
            stats.regions += 1;
            let region = DefectRegion::from_corners(*b, label);
            let (crops, fallback) = sample_context_crops(&scene.image, &region, spec, rng)?;
            stats.fallbacks += fallback as usize;
            let mut refs = Vec::with_capacity(crops.len());
            for c in crops {
                let rel = format!("context/{stem}_b{bi}_s{}.png", c.size_index + 1);
                c.image.save(out_dir.join(&rel))?;
                refs.push((rel, label));
            }
            stats.crops_added += refs.len();
            out.samples
                .extend(assign_alt_texts(&refs, taxonomy, pool, Split::Transition, rng)?);
        }
    }
    Ok((out, stats))
}

fn rebase(from: &Path, to: &Path, image_ref: &str) -> String {
    let p = Path::new(image_ref);
    if p.is_absolute() || from == to {
        return image_ref.to_string();
    }
    let abs = from.join(p);
    match abs.canonicalize() {
        Ok(abs) => abs.to_string_lossy().into_owned(),
        Err(_) => abs.to_string_lossy().into_owned(),
    }
}
