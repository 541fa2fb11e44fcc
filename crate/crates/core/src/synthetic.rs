//! Procedural stand-ins for patrol imagery.
//!
//! Every component type has its own shape family and every defect status a
//! geometric perturbation of it (missing arc, rust-coloured arcs, touching
//! dumbbells, a dropped disc). External-interference types are loose clusters
//! (nest twigs) or streamers. All generation is a pure function of the RNG.

use std::collections::BTreeMap;
use std::f32::consts::{PI, TAU};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{assign_alt_texts, AltTextPool, Split};
use crate::error::SynthError;
use crate::geometry::BBox;
use crate::manifest::Manifest;
use crate::taxonomy::{CategoryId, Status, Taxonomy};

/// An image with pixel-space boxes `[x_min, y_min, x_max, y_max]` (max exclusive).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScene {
    pub image: RgbImage,
    pub boxes: Vec<[u32; 4]>,
    pub labels: Vec<CategoryId>,
}

impl DetectionScene {
    pub fn bbox(&self, i: usize) -> BBox {
        let [x0, y0, x1, y1] = self.boxes[i];
        BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Plain,
    Clutter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// (height, width) in pixels.
    pub image_size: (u32, u32),
    /// Inclusive object-count range.
    pub objects_per_scene: (usize, usize),
    /// Inclusive range of the square sprite extent in pixels.
    pub object_size: (u32, u32),
    pub background: Background,
    pub clutter_density: f32,
    pub max_overlap_iou: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: (256, 256),
            objects_per_scene: (2, 4),
            object_size: (32, 72),
            background: Background::Clutter,
            clutter_density: 0.4,
            max_overlap_iou: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (h, w) = self.image_size;
        if h < 64 || w < 64 {
            return Err(SynthError::Spec(format!("image size {h}x{w} is below 64x64")));
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return Err(SynthError::Spec("empty object-count range".into()));
        }
        let (lo, hi) = self.object_size;
        if lo < 8 || lo > hi || hi > h.min(w) {
            return Err(SynthError::Spec(format!("object size range {lo}..={hi} invalid")));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return Err(SynthError::Spec("clutter density outside [0, 1]".into()));
        }
        Ok(())
    }
}

type Pt = (f32, f32);

#[derive(Debug, Clone, Copy)]
enum Arc {
    Full,
    Gap(f32, f32),
    Only(f32, f32),
}

#[derive(Debug, Clone, Copy)]
enum Prim {
    Ellipse { c: Pt, r: Pt },
    Ring { c: Pt, r: Pt, half: f32, arc: Arc },
    Capsule { a: Pt, b: Pt, half: f32 },
}

fn angle_in(angle: f32, start: f32, end: f32) -> bool {
    let a = (angle - start).rem_euclid(TAU);
    let span = (end - start).rem_euclid(TAU);
    a <= span
}

impl Prim {
    fn contains(&self, (u, v): Pt) -> bool {
        match *self {
            Prim::Ellipse { c, r } => {
                let (dx, dy) = ((u - c.0) / r.0, (v - c.1) / r.1);
                dx * dx + dy * dy <= 1.0
            }
            Prim::Ring { c, r, half, arc } => {
                let (du, dv) = (u - c.0, v - c.1);
                let len = (du * du + dv * dv).sqrt();
                if len < 1e-6 {
                    return false;
                }
                let d = ((du / r.0).powi(2) + (dv / r.1).powi(2)).sqrt();
                let along = len / d;
                if (len - along).abs() > half {
                    return false;
                }
                let angle = dv.atan2(du).rem_euclid(TAU);
                match arc {
                    Arc::Full => true,
                    Arc::Gap(s, e) => !angle_in(angle, s, e),
                    Arc::Only(s, e) => angle_in(angle, s, e),
                }
            }
            Prim::Capsule { a, b, half } => {
                let (abx, aby) = (b.0 - a.0, b.1 - a.1);
                let (apx, apy) = (u - a.0, v - a.1);
                let len2 = abx * abx + aby * aby;
                let t = if len2 > 0.0 {
                    ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (dx, dy) = (apx - t * abx, apy - t * aby);
                dx * dx + dy * dy <= half * half
            }
        }
    }
}

/// Primitives in sprite-local coordinates (origin at the sprite centre).
struct Sprite {
    prims: Vec<(Prim, [u8; 3])>,
    rotation: f32,
}

/// A rasterized sprite: colour plus coverage.
struct Layer {
    w: u32,
    h: u32,
    pixels: Vec<Option<[u8; 3]>>,
}

impl Layer {
    fn rasterize(sprite: &Sprite, w: u32, h: u32) -> Self {
        let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
        let (sin, cos) = (-sprite.rotation).sin_cos();
        let mut pixels = vec![None; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let local = (px * cos - py * sin, px * sin + py * cos);
                pixels[(y * w + x) as usize] = sprite
                    .prims
                    .iter()
                    .rev()
                    .find(|(p, _)| p.contains(local))
                    .map(|(_, c)| *c);
            }
        }
        Self { w, h, pixels }
    }

    /// Tight `[x0, y0, x1, y1)` extent of covered pixels.
    fn extent(&self) -> Option<[u32; 4]> {
        let mut ext: Option<[u32; 4]> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.pixels[(y * self.w + x) as usize].is_some() {
                    let e = ext.get_or_insert([x, y, x + 1, y + 1]);
                    e[0] = e[0].min(x);
                    e[1] = e[1].min(y);
                    e[2] = e[2].max(x + 1);
                    e[3] = e[3].max(y + 1);
                }
            }
        }
        ext
    }

    fn composite<R: Rng + ?Sized>(&self, img: &mut RgbImage, ox: i32, oy: i32, rng: &mut R) {
        for y in 0..self.h {
            for x in 0..self.w {
                if let Some(c) = self.pixels[(y * self.w + x) as usize] {
                    let (ix, iy) = (ox + x as i32, oy + y as i32);
                    if ix >= 0 && iy >= 0 && (ix as u32) < img.width() && (iy as u32) < img.height() {
                        img.put_pixel(ix as u32, iy as u32, Rgb(jitter(c, 10, rng)));
                    }
                }
            }
        }
    }
}

fn jitter<R: Rng + ?Sized>(c: [u8; 3], amount: i32, rng: &mut R) -> [u8; 3] {
    let n = rng.random_range(-amount..=amount);
    c.map(|v| (v as i32 + n).clamp(0, 255) as u8)
}

fn gray<R: Rng + ?Sized>(rng: &mut R, lo: u8, hi: u8) -> [u8; 3] {
    let g = rng.random_range(lo..=hi);
    [g, g, g.saturating_add(rng.random_range(0..=12))]
}

fn ring_sprite<R: Rng + ?Sized>(s: f32, defect: bool, rng: &mut R) -> Sprite {
    let metal = gray(rng, 165, 215);
    let rx = 0.42 * s;
    let ry = rng.random_range(0.24..0.42) * s;
    let arc = if defect {
        let start = rng.random_range(0.0..TAU);
        Arc::Gap(start, start + rng.random_range(1.0..1.6))
    } else {
        Arc::Full
    };
    let rod = gray(rng, 50, 90);
    Sprite {
        prims: vec![
            (Prim::Capsule { a: (0.0, -0.5 * s), b: (0.0, 0.0), half: 0.035 * s }, rod),
            (Prim::Ring { c: (0.0, 0.0), r: (rx, ry), half: 0.065 * s, arc }, metal),
        ],
        rotation: rng.random_range(-0.5..0.5),
    }
}

fn shielded_ring_sprite<R: Rng + ?Sized>(s: f32, defect: bool, rng: &mut R) -> Sprite {
    let silver = gray(rng, 185, 230);
    let r = (0.45 * s, rng.random_range(0.3..0.45) * s);
    let inner = (r.0 * 0.62, r.1 * 0.62);
    let mut prims = vec![
        (Prim::Capsule { a: (-inner.0, 0.0), b: (-r.0, 0.0), half: 0.03 * s }, silver),
        (Prim::Capsule { a: (inner.0, 0.0), b: (r.0, 0.0), half: 0.03 * s }, silver),
        (Prim::Ring { c: (0.0, 0.0), r, half: 0.045 * s, arc: Arc::Full }, silver),
        (Prim::Ring { c: (0.0, 0.0), r: inner, half: 0.04 * s, arc: Arc::Full }, silver),
    ];
    if defect {
        let rust = [
            rng.random_range(140..=180),
            rng.random_range(62..=95),
            rng.random_range(25..=50),
        ];
        for (radius, half) in [(r, 0.05 * s), (inner, 0.045 * s)] {
            let start = rng.random_range(0.0..TAU);
            let arc = Arc::Only(start, start + rng.random_range(2.5..5.5));
            prims.push((Prim::Ring { c: (0.0, 0.0), r: radius, half, arc }, rust));
        }
    }
    Sprite {
        prims,
        rotation: rng.random_range(-PI..PI),
    }
}

fn dumbbell(center: Pt, angle: f32, s: f32, color: [u8; 3]) -> Vec<(Prim, [u8; 3])> {
    let (sin, cos) = angle.sin_cos();
    let at = |dx: f32, dy: f32| (center.0 + dx * cos - dy * sin, center.1 + dx * sin + dy * cos);
    vec![
        (Prim::Capsule { a: at(0.0, -0.25 * s), b: at(0.0, 0.0), half: 0.035 * s }, color),
        (Prim::Capsule { a: at(-0.3 * s, 0.0), b: at(0.3 * s, 0.0), half: 0.03 * s }, color),
        (Prim::Ellipse { c: at(-0.3 * s, 0.02 * s), r: (0.12 * s, 0.085 * s) }, color),
        (Prim::Ellipse { c: at(0.3 * s, 0.02 * s), r: (0.12 * s, 0.085 * s) }, color),
    ]
}

fn hammer_sprite<R: Rng + ?Sized>(s: f32, defect: bool, rng: &mut R) -> Sprite {
    let wire = gray(rng, 30, 60);
    let body = gray(rng, 70, 115);
    let mut prims = vec![(
        Prim::Capsule { a: (-0.5 * s, -0.28 * s), b: (0.5 * s, -0.28 * s), half: 0.018 * s },
        wire,
    )];
    if defect {
        let off = rng.random_range(0.1..0.16) * s;
        prims.extend(dumbbell((-off, 0.0), 0.0, s * 0.85, body));
        let tilt = rng.random_range(0.25..0.55) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        prims.extend(dumbbell((off, rng.random_range(0.04..0.1) * s), tilt, s * 0.85, body));
    } else {
        prims.extend(dumbbell((0.0, 0.0), 0.0, s, body));
    }
    Sprite {
        prims,
        rotation: rng.random_range(-0.3..0.3),
    }
}

fn insulator_sprite<R: Rng + ?Sized>(s: f32, defect: bool, rng: &mut R) -> Sprite {
    let palette = [[70u8, 145, 125], [150, 95, 60], [175, 175, 185]];
    let disc = jitter(*palette.choose(rng).unwrap(), 12, rng);
    let rod = gray(rng, 40, 70);
    let n = rng.random_range(6..=8);
    let missing = defect.then(|| rng.random_range(1..n - 1));
    let span = 0.84 * s;
    let step = span / (n - 1) as f32;
    let rx = rng.random_range(0.2..0.27) * s;
    let mut prims = vec![(Prim::Capsule { a: (0.0, -0.5 * s), b: (0.0, 0.5 * s), half: 0.03 * s }, rod)];
    for i in 0..n {
        if Some(i) == missing {
            continue;
        }
        let y = -0.42 * s + i as f32 * step;
        prims.push((Prim::Ellipse { c: (0.0, y), r: (rx, step * 0.36) }, disc));
    }
    Sprite {
        prims,
        rotation: rng.random_range(-0.4..0.4),
    }
}

fn nest_sprite<R: Rng + ?Sized>(s: f32, rng: &mut R) -> Sprite {
    let mut prims = vec![(
        Prim::Ellipse { c: (0.0, 0.05 * s), r: (0.3 * s, 0.18 * s) },
        [rng.random_range(55..=75), rng.random_range(38..=50), rng.random_range(20..=30)],
    )];
    for _ in 0..rng.random_range(28..=42) {
        let t = rng.random_range(0.0..TAU);
        let rr = rng.random_range(0.0..1.0f32).sqrt();
        let c = (rr * 0.36 * s * t.cos(), rr * 0.24 * s * t.sin());
        let dir = rng.random_range(0.0..PI);
        let len = rng.random_range(0.08..0.16) * s;
        let brown = [
            rng.random_range(95..=145),
            rng.random_range(62..=92),
            rng.random_range(28..=50),
        ];
        let d = (len * dir.cos(), len * dir.sin());
        prims.push((
            Prim::Capsule {
                a: (c.0 - d.0, c.1 - d.1),
                b: (c.0 + d.0, c.1 + d.1),
                half: rng.random_range(0.014..0.03) * s,
            },
            brown,
        ));
    }
    Sprite {
        prims,
        rotation: rng.random_range(-PI..PI),
    }
}

fn streamer_sprite<R: Rng + ?Sized>(s: f32, rng: &mut R) -> Sprite {
    let palette = [[210u8, 40, 40], [40, 70, 200], [235, 235, 235], [225, 200, 40]];
    let color = jitter(*palette.choose(rng).unwrap(), 15, rng);
    let amp = rng.random_range(0.06..0.14) * s;
    let freq = rng.random_range(1.5..3.0) * TAU / s;
    let phase = rng.random_range(0.0..TAU);
    let slope = rng.random_range(-0.4..0.4);
    let half = rng.random_range(0.035..0.06) * s;
    let pts: Vec<Pt> = (0..=12)
        .map(|i| {
            let x = -0.45 * s + 0.9 * s * i as f32 / 12.0;
            (x, amp * (freq * x + phase).sin() + slope * x)
        })
        .collect();
    let prims = pts
        .windows(2)
        .map(|w| (Prim::Capsule { a: w[0], b: w[1], half }, color))
        .collect();
    Sprite {
        prims,
        rotation: rng.random_range(-PI..PI),
    }
}

fn sprite_for<R: Rng + ?Sized>(
    taxonomy: &Taxonomy,
    category: CategoryId,
    extent: f32,
    rng: &mut R,
) -> Result<Sprite, SynthError> {
    let c = taxonomy.get(category)?;
    let defect = c.status == Status::Defect;
    // Shape families are keyed on the component type; unknown types fall back
    // to a family chosen by their position in the taxonomy.
    let family = match c.component_type.as_str() {
        "grading_ring" => 0,
        "shielded_ring" => 1,
        "shockproof_hammer" => 2,
        "insulator" => 3,
        "bird_nest" => 4,
        "foreign_body" => 5,
        other => taxonomy
            .component_types()
            .iter()
            .position(|t| t.name == other)
            .unwrap_or(0)
            % 6,
    };
    Ok(match family {
        0 => ring_sprite(extent, defect, rng),
        1 => shielded_ring_sprite(extent, defect, rng),
        2 => hammer_sprite(extent, defect, rng),
        3 => insulator_sprite(extent, defect, rng),
        4 => nest_sprite(extent, rng),
        _ => streamer_sprite(extent, rng),
    })
}

fn paint_background<R: Rng + ?Sized>(
    w: u32,
    h: u32,
    background: Background,
    density: f32,
    rng: &mut R,
) -> RgbImage {
    let top = [
        rng.random_range(110..=170u8),
        rng.random_range(150..=200u8),
        rng.random_range(195..=240u8),
    ];
    let bottom = top.map(|v| v.saturating_add(rng.random_range(10..=40)));
    let mut img = RgbImage::from_fn(w, h, |_, y| {
        let t = y as f32 / h.max(1) as f32;
        let c = [0, 1, 2].map(|i| (top[i] as f32 * (1.0 - t) + bottom[i] as f32 * t) as u8);
        Rgb(c)
    });
    for p in img.pixels_mut() {
        p.0 = jitter(p.0, 5, rng);
    }
    if background == Background::Clutter {
        let n = (density * (w * h) as f32 / 700.0).round() as usize;
        for _ in 0..n {
            let a = (rng.random_range(0.0..w as f32), rng.random_range(0.0..h as f32));
            let angle = rng.random_range(0.0..PI);
            let len = rng.random_range(0.1..0.5) * w.min(h) as f32;
            let b = (a.0 + len * angle.cos(), a.1 + len * angle.sin());
            let (prim, color) = if rng.random_bool(0.75) {
                (Prim::Capsule { a, b, half: rng.random_range(0.6..1.8) }, gray(rng, 45, 120))
            } else {
                let r = (rng.random_range(2.0..7.0), rng.random_range(2.0..7.0));
                (
                    Prim::Ellipse { c: a, r },
                    [rng.random_range(60..=120), rng.random_range(90..=140), rng.random_range(50..=90)],
                )
            };
            stamp(&mut img, prim, color, rng);
        }
    }
    img
}

fn stamp<R: Rng + ?Sized>(img: &mut RgbImage, prim: Prim, color: [u8; 3], rng: &mut R) {
    let (x0, y0, x1, y1) = match prim {
        Prim::Capsule { a, b, half } => (a.0.min(b.0) - half, a.1.min(b.1) - half, a.0.max(b.0) + half, a.1.max(b.1) + half),
        Prim::Ellipse { c, r } | Prim::Ring { c, r, .. } => (c.0 - r.0, c.1 - r.1, c.0 + r.0, c.1 + r.1),
    };
    let (w, h) = img.dimensions();
    let xs = (x0.floor().max(0.0) as u32)..(x1.ceil().max(0.0) as u32).min(w);
    let ys = (y0.floor().max(0.0) as u32)..(y1.ceil().max(0.0) as u32).min(h);
    for y in ys {
        for x in xs.clone() {
            if prim.contains((x as f32 + 0.5, y as f32 + 0.5)) {
                img.put_pixel(x, y, Rgb(jitter(color, 6, rng)));
            }
        }
    }
}

/// Renders one instance-level image: the object fills most of the frame.
pub fn render_instance<R: Rng + ?Sized>(
    taxonomy: &Taxonomy,
    category: CategoryId,
    size: (u32, u32),
    rng: &mut R,
) -> Result<RgbImage, SynthError> {
    let (h, w) = size;
    if h < 16 || w < 16 {
        return Err(SynthError::Spec(format!("instance size {h}x{w} below 16x16")));
    }
    taxonomy.get(category)?;
    let background = if rng.random_bool(0.5) {
        Background::Plain
    } else {
        Background::Clutter
    };
    let density = rng.random_range(0.2..0.6);
    let mut img = paint_background(w, h, background, density, rng);
    let extent = rng.random_range(0.62..0.9) * w.min(h) as f32;
    let sprite = sprite_for(taxonomy, category, extent, rng)?;
    let layer = Layer::rasterize(&sprite, w, h);
    let max_shift = (w.min(h) as f32 * 0.08) as i32;
    let dx = rng.random_range(-max_shift..=max_shift);
    let dy = rng.random_range(-max_shift..=max_shift);
    layer.composite(&mut img, dx, dy, rng);
    Ok(img)
}

/// Places objects on a background; the first object is always a defect.
pub fn generate_scene<R: Rng + ?Sized>(
    spec: &SceneSpec,
    taxonomy: &Taxonomy,
    rng: &mut R,
) -> Result<DetectionScene, SynthError> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut image = paint_background(w, h, spec.background, spec.clutter_density, rng);
    let count = rng.random_range(spec.objects_per_scene.0..=spec.objects_per_scene.1);
    let defects = taxonomy.defect_ids();
    let all: Vec<CategoryId> = taxonomy.ids().collect();

    let mut boxes: Vec<[u32; 4]> = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    const ATTEMPTS: usize = 64;
    for k in 0..count {
        let pool = if k == 0 && !defects.is_empty() { &defects } else { &all };
        let category = *pool.choose(rng).expect("taxonomy is non-empty");
        let mut placed = false;
        for _ in 0..ATTEMPTS {
            let side = rng.random_range(spec.object_size.0..=spec.object_size.1);
            let sprite = sprite_for(taxonomy, category, side as f32 * 0.95, rng)?;
            let layer = Layer::rasterize(&sprite, side, side);
            let Some([lx0, ly0, lx1, ly1]) = layer.extent() else { continue };
            let ox = rng.random_range(0..=w - side);
            let oy = rng.random_range(0..=h - side);
            let candidate = [ox + lx0, oy + ly0, ox + lx1, oy + ly1];
            let cb = to_bbox(candidate);
            if boxes.iter().any(|b| to_bbox(*b).iou(&cb) > spec.max_overlap_iou) {
                continue;
            }
            layer.composite(&mut image, ox as i32, oy as i32, rng);
            boxes.push(candidate);
            labels.push(category);
            placed = true;
            break;
        }
        if !placed {
            return Err(SynthError::Placement {
                requested: count,
                placed_so_far: k,
                attempts: ATTEMPTS,
            });
        }
    }
    Ok(DetectionScene { image, boxes, labels })
}

fn to_bbox(b: [u32; 4]) -> BBox {
    BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64)
}

/// `n` scenes from `ChaCha8Rng::seed_from_u64(spec.seed)`.
pub fn generate_scenes(spec: &SceneSpec, taxonomy: &Taxonomy, n: usize) -> Result<Vec<DetectionScene>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..n).map(|_| generate_scene(spec, taxonomy, &mut rng)).collect()
}

/// Renders `n_per_category` instances per category into `out_dir/instances/`
/// and pairs them with alt-texts. Image refs are relative to `out_dir`.
pub fn generate_instance_dataset<R: Rng + ?Sized>(
    taxonomy: &Taxonomy,
    n_per_category: usize,
    size: (u32, u32),
    pool: &AltTextPool,
    out_dir: &Path,
    rng: &mut R,
) -> Result<Manifest, SynthError> {
    let images = render_instance_files(taxonomy, n_per_category, size, out_dir, rng)?;
    let samples = assign_alt_texts(&images, taxonomy, pool, Split::Pretrain, rng)?;
    let mut m = Manifest::new(taxonomy.clone());
    m.samples = samples;
    Ok(m)
}

/// Renders and writes instance PNGs, returning `(image_ref, category)` pairs.
pub fn render_instance_files<R: Rng + ?Sized>(
    taxonomy: &Taxonomy,
    n_per_category: usize,
    size: (u32, u32),
    out_dir: &Path,
    rng: &mut R,
) -> Result<Vec<(String, CategoryId)>, SynthError> {
    if n_per_category == 0 {
        return Err(SynthError::Spec("n_per_category must be at least 1".into()));
    }
    let dir = out_dir.join("instances");
    fs::create_dir_all(&dir).map_err(|source| SynthError::Io { path: dir.clone(), source })?;
    let mut images = Vec::new();
    for id in taxonomy.ids() {
        let name = &taxonomy.get(id)?.name;
        for i in 0..n_per_category {
            let img = render_instance(taxonomy, id, size, rng)?;
            let rel = format!("instances/{name}_{i:04}.png");
            img.save(out_dir.join(&rel))?;
            images.push((rel, id));
        }
    }
    Ok(images)
}

pub const BOXES_FILE: &str = "boxes.csv";

/// Writes `scene_NNNN.png` files plus a boxes file
/// (`image_ref,x_min,y_min,x_max,y_max,category` per line).
pub fn save_scenes(dir: &Path, scenes: &[DetectionScene], taxonomy: &Taxonomy) -> Result<Vec<String>, SynthError> {
    fs::create_dir_all(dir).map_err(|source| SynthError::Io { path: dir.to_path_buf(), source })?;
    let mut refs = Vec::with_capacity(scenes.len());
    let mut lines = String::new();
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("scene_{i:04}.png");
        scene.image.save(dir.join(&name))?;
        for (b, &label) in scene.boxes.iter().zip(&scene.labels) {
            let cat = &taxonomy.get(label)?.name;
            lines.push_str(&format!("{name},{},{},{},{},{cat}\n", b[0], b[1], b[2], b[3]));
        }
        refs.push(name);
    }
    let path = dir.join(BOXES_FILE);
    let mut f = fs::File::create(&path).map_err(|source| SynthError::Io { path: path.clone(), source })?;
    f.write_all(lines.as_bytes())
        .map_err(|source| SynthError::Io { path, source })?;
    Ok(refs)
}

/// Loads every PNG in `dir` (sorted by name) with its annotations.
pub fn load_scenes(dir: &Path, taxonomy: &Taxonomy) -> Result<Vec<(String, DetectionScene)>, SynthError> {
    let io = |path: PathBuf| move |source| SynthError::Io { path, source };
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(io(dir.to_path_buf()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();

    let boxes_path = dir.join(BOXES_FILE);
    let text = fs::read_to_string(&boxes_path).map_err(io(boxes_path.clone()))?;
    let mut annotations: BTreeMap<String, Vec<([u32; 4], CategoryId)>> = BTreeMap::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| SynthError::BoxesFile {
            path: boxes_path.clone(),
            line: line_no + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        }
        let mut b = [0u32; 4];
        for (slot, f) in b.iter_mut().zip(&fields[1..5]) {
            *slot = f.parse().map_err(|e| bad(format!("bad coordinate `{f}`: {e}")))?;
        }
        let id = taxonomy.id(fields[5]).map_err(|e| bad(e.to_string()))?;
        annotations.entry(fields[0].to_string()).or_default().push((b, id));
    }

    names
        .into_iter()
        .map(|name| {
            let image = image::open(dir.join(&name))?.to_rgb8();
            let (boxes, labels) = annotations.remove(&name).unwrap_or_default().into_iter().unzip();
            Ok((name, DetectionScene { image, boxes, labels }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn render_is_deterministic() {
        let t = Taxonomy::desk();
        for id in t.ids() {
            let a = render_instance(&t, id, (64, 64), &mut rng(5)).unwrap();
            let b = render_instance(&t, id, (64, 64), &mut rng(5)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn defect_perturbs_the_normal_shape() {
        let t = Taxonomy::desk();
        for (normal, defect) in [
            ("normal_grading_ring", "grading_ring_damage"),
            ("normal_shielded_ring", "shielded_ring_corrosion"),
            ("normal_shockproof_hammer", "shockproof_hammer_intersection"),
            ("normal_insulator", "insulator_bunch_drop"),
        ] {
            let a = render_instance(&t, t.id(normal).unwrap(), (64, 64), &mut rng(9)).unwrap();
            let b = render_instance(&t, t.id(defect).unwrap(), (64, 64), &mut rng(9)).unwrap();
            assert_ne!(a, b, "{normal} vs {defect}");
        }
    }

    #[test]
    fn tiny_instances_and_unknown_categories_rejected() {
        let t = Taxonomy::desk();
        assert!(render_instance(&t, CategoryId(0), (8, 64), &mut rng(0)).is_err());
        assert!(matches!(
            render_instance(&t, CategoryId(42), (64, 64), &mut rng(0)),
            Err(SynthError::Taxonomy(_))
        ));
    }

    #[test]
    fn object_counts_are_honoured() {
        let t = Taxonomy::desk();
        let mut spec = SceneSpec {
            objects_per_scene: (0, 0),
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec, &t, &mut rng(1)).unwrap();
        assert!(s.boxes.is_empty() && s.labels.is_empty());
        spec.objects_per_scene = (3, 3);
        let s = generate_scene(&spec, &t, &mut rng(1)).unwrap();
        assert_eq!((s.boxes.len(), s.labels.len()), (3, 3));
        assert_eq!(t.get(s.labels[0]).unwrap().status, Status::Defect);
    }

    #[test]
    fn impossible_placement_errors() {
        let t = Taxonomy::desk();
        let spec = SceneSpec {
            image_size: (64, 64),
            objects_per_scene: (30, 30),
            object_size: (60, 64),
            max_overlap_iou: 0.0,
            ..SceneSpec::default()
        };
        assert!(matches!(
            generate_scene(&spec, &t, &mut rng(0)),
            Err(SynthError::Placement { .. })
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        let spec = SceneSpec {
            image_size: (32, 256),
            ..SceneSpec::default()
        };
        assert!(spec.validate().is_err());
        let spec = SceneSpec {
            objects_per_scene: (3, 1),
            ..SceneSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn scenes_round_trip_through_disk() {
        let t = Taxonomy::desk();
        let spec = SceneSpec {
            seed: 4,
            ..SceneSpec::default()
        };
        let mut scenes = generate_scenes(&spec, &t, 3).unwrap();
        scenes.push(generate_scene(&SceneSpec { objects_per_scene: (0, 0), ..spec.clone() }, &t, &mut rng(0)).unwrap());
        let dir = tempfile::tempdir().unwrap();
        save_scenes(dir.path(), &scenes, &t).unwrap();
        let loaded = load_scenes(dir.path(), &t).unwrap();
        assert_eq!(loaded.len(), 4);
        for ((_, a), b) in loaded.iter().zip(&scenes) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn instance_dataset_counts() {
        let t = Taxonomy::desk();
        let pool = crate::curation::build_alt_text_pool(&t, &crate::curation::DEFAULT_TEMPLATES, &BTreeMap::new()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = generate_instance_dataset(&t, 2, (32, 32), &pool, dir.path(), &mut rng(0)).unwrap();
        assert_eq!(m.samples.len(), 20);
        for s in &m.samples {
            assert!(pool.texts(&s.category).unwrap().contains(&s.alt_text));
            assert!(dir.path().join(&s.image_ref).is_file());
        }
    }
}
