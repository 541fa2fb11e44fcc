//! Dense single-stage detector on the vision encoder: a simple feature
//! pyramid built from the single backbone map, a shared convolutional head
//! with per-class sigmoid scores and distance-to-side box regression,
//! focal + GIoU training and per-class NMS at inference.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use linevlp_core::synthetic::DetectionScene;
use linevlp_core::{nms, BBox, CategoryId, Detection, Status, Taxonomy};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{images_to_tensor, EncoderConfig, VisionEncoder};
use crate::error::{ModelError, Result};
use crate::layers::{gelu, scalar, sigmoid};
use crate::optim::{AdamConfig, AdamW, GroupSpec};
use crate::params::{load_checkpoint, save_checkpoint, Checkpoint, Init, ParamStore, VarBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// (H, W) used at inference.
    pub input_size: (usize, usize),
    pub pyramid_strides: Vec<usize>,
    /// Pyramid and head width; 0 means the backbone width.
    pub channels: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Empty means 0.75x, 1x and 1.25x of `input_size`, snapped to patch multiples.
    pub multiscale_train_sizes: Vec<(usize, usize)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub backbone_lr: f64,
    pub decoder_lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub box_weight: f64,
    /// Cells within this Chebyshev distance of the centre cell whose centres
    /// fall inside the box are also positives.
    pub center_radius: usize,
    pub prior_prob: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: (256, 256),
            pyramid_strides: vec![8, 16, 32],
            channels: 0,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            multiscale_train_sizes: Vec::new(),
            epochs: 50,
            batch_size: 4,
            backbone_lr: 1e-5,
            decoder_lr: 1e-4,
            weight_decay: 1e-4,
            max_grad_norm: Some(10.0),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            box_weight: 1.0,
            center_radius: 1,
            prior_prob: 0.01,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn desk() -> Self {
        Self { epochs: 20, backbone_lr: 1e-4, decoder_lr: 1e-3, ..Self::default() }
    }

    pub fn validate(&self, patch: usize) -> Result<()> {
        let bad = |m: String| Err(ModelError::Param(m));
        if self.pyramid_strides.is_empty() || self.pyramid_strides.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("pyramid strides {:?} must be non-empty and ascending", self.pyramid_strides));
        }
        for &s in &self.pyramid_strides {
            let ok = if s >= patch { s % patch == 0 && (s / patch).is_power_of_two() } else { patch % s == 0 && (patch / s).is_power_of_two() };
            if !ok {
                return bad(format!("stride {s} cannot be produced from patch stride {patch}"));
            }
        }
        for (name, v) in [("score_threshold", self.score_threshold), ("nms_iou", self.nms_iou), ("focal_alpha", self.focal_alpha), ("prior_prob", self.prior_prob)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} must lie in (0, 1)"));
            }
        }
        let coarsest = *self.pyramid_strides.last().unwrap();
        let unit = coarsest.max(patch);
        for &(h, w) in std::iter::once(&self.input_size).chain(&self.multiscale_train_sizes) {
            if h % unit != 0 || w % unit != 0 || h == 0 || w == 0 {
                return bad(format!("size {h}x{w} is not a multiple of {unit}"));
            }
        }
        if self.batch_size == 0 || self.max_detections == 0 {
            return bad("batch_size and max_detections must be positive".into());
        }
        if !(self.backbone_lr >= 0.0) || !(self.decoder_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        Ok(())
    }

    pub fn train_sizes(&self, patch: usize) -> Vec<(usize, usize)> {
        if !self.multiscale_train_sizes.is_empty() {
            return self.multiscale_train_sizes.clone();
        }
        multiscale_sizes(self.input_size, patch.max(*self.pyramid_strides.last().unwrap_or(&patch)))
    }
}

/// 0.75x, 1x, 1.25x of `size`, each side rounded to the nearest multiple of `unit`.
pub fn multiscale_sizes(size: (usize, usize), unit: usize) -> Vec<(usize, usize)> {
    let snap = |v: f64| (((v / unit as f64).round() as usize).max(1)) * unit;
    let mut out: Vec<(usize, usize)> = [0.75, 1.0, 1.25]
        .iter()
        .map(|f| (snap(size.0 as f64 * f), snap(size.1 as f64 * f)))
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(vb: &VarBuilder, c_in: usize, c_out: usize, k: usize, weight: Init, bias: Option<Init>) -> Result<Self> {
        Ok(Self {
            weight: vb.get(&[c_out, c_in, k, k], "weight", weight)?,
            bias: bias.map(|b| vb.get(&[c_out], "bias", b)).transpose()?,
            padding: k / 2,
        })
    }

    fn default_init(c_in: usize, k: usize) -> Init {
        Init::Uniform((1.0 / (c_in * k * k) as f64).sqrt())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        add_channel_bias(y, self.bias.as_ref())
    }
}

fn add_channel_bias(y: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    Ok(match bias {
        Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
        None => y,
    })
}

/// 2x2 transposed convolution with stride 2.
#[derive(Debug, Clone)]
pub struct Upsample2 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Upsample2 {
    fn new(vb: &VarBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.get(&[c_in, c_out, 2, 2], "weight", Init::Uniform((1.0 / (c_in * 4) as f64).sqrt()))?,
            bias: vb.get(&[c_out], "bias", Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        add_channel_bias(x.conv_transpose2d(&self.weight, 0, 0, 2, 1)?, Some(&self.bias))
    }
}

#[derive(Debug, Clone)]
enum LevelOp {
    /// Repeated x2 upsampling, GELU between steps.
    Up(Vec<Upsample2>),
    /// Max-pool by the factor (1 = identity), then a 1x1 projection.
    Down(usize, Conv2d),
}

/// One output map per stride, all from the single stride-`patch` map.
#[derive(Debug, Clone)]
pub struct SimplePyramid {
    levels: Vec<(usize, LevelOp)>,
    patch: usize,
}

impl SimplePyramid {
    pub fn new(vb: &VarBuilder, d: usize, c: usize, patch: usize, strides: &[usize]) -> Result<Self> {
        let mut levels = Vec::new();
        for &s in strides {
            let vb = vb.pp(format!("s{s}"));
            let op = if s < patch {
                let steps = (patch / s).trailing_zeros() as usize;
                let ups = (0..steps)
                    .map(|i| Upsample2::new(&vb.pp(format!("up{i}")), if i == 0 { d } else { c }, c))
                    .collect::<Result<_>>()?;
                LevelOp::Up(ups)
            } else {
                LevelOp::Down(s / patch, Conv2d::new(&vb.pp("proj"), d, c, 1, Conv2d::default_init(d, 1), Some(Init::Zeros))?)
            };
            levels.push((s, op));
        }
        Ok(Self { levels, patch })
    }

    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.0).collect()
    }

    pub fn forward(&self, fm: &Tensor) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = fm.dims4()?;
        let mut out = Vec::with_capacity(self.levels.len());
        for (s, op) in &self.levels {
            let y = match op {
                LevelOp::Up(ups) => {
                    let mut x = fm.clone();
                    for (i, u) in ups.iter().enumerate() {
                        if i > 0 {
                            x = gelu(&x)?;
                        }
                        x = u.forward(&x)?;
                    }
                    x
                }
                LevelOp::Down(f, conv) => {
                    if h % f != 0 || w % f != 0 {
                        return Err(ModelError::Param(format!(
                            "stride {s} needs the {h}x{w} patch grid to be divisible by {f}"
                        )));
                    }
                    let x = if *f > 1 { fm.max_pool2d(*f)? } else { fm.clone() };
                    conv.forward(&x)?
                }
            };
            debug_assert_eq!(y.dims()[2] * s, h * self.patch);
            out.push(y);
        }
        Ok(out)
    }
}

/// Shared head: 3x3 conv + GELU, then class logits and box distances.
#[derive(Debug, Clone)]
pub struct DenseHead {
    pub conv: Conv2d,
    pub cls: Conv2d,
    pub reg: Conv2d,
}

impl DenseHead {
    pub fn new(vb: &VarBuilder, c: usize, classes: usize, prior: f64) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&vb.pp("conv"), c, c, 3, Conv2d::default_init(c, 3), Some(Init::Zeros))?,
            cls: Conv2d::new(&vb.pp("cls"), c, classes, 1, Init::Normal(0.01), Some(Init::Const(-((1.0 - prior) / prior).ln())))?,
            reg: Conv2d::new(&vb.pp("reg"), c, 4, 1, Init::Normal(0.01), Some(Init::Const(2f64.ln())))?,
        })
    }
}

/// Outputs of one pyramid level.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub stride: usize,
    /// (B, m, h, w)
    pub cls_logits: Tensor,
    /// (B, 4, h, w) distances (left, top, right, bottom) in input pixels.
    pub ltrb: Tensor,
}

const REG_CLAMP: f64 = 6.0;

/// Box regression: `exp(clamp(raw)) * stride`.
pub fn decode_distances(raw: &Tensor, stride: usize) -> Result<Tensor> {
    Ok((raw.clamp(-REG_CLAMP, REG_CLAMP)?.exp()? * stride as f64)?)
}

/// Backbone, pyramid and head plus the detection class list.
pub struct Detector {
    pub encoder: EncoderConfig,
    pub config: DetectorConfig,
    pub backbone: VisionEncoder,
    pub pyramid: SimplePyramid,
    pub head: DenseHead,
    /// Detection class k is taxonomy category `classes[k]`.
    pub classes: Vec<CategoryId>,
    pub store: ParamStore,
}

pub const DETECTOR_KIND: &str = "detector";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorMeta {
    pub kind: String,
    pub encoder: EncoderConfig,
    pub detector: DetectorConfig,
    pub classes: Vec<String>,
    /// "pretrained" or "random".
    pub backbone_init: String,
    pub epochs_done: usize,
    pub provenance: Option<String>,
}

impl Detector {
    pub fn new(encoder: &EncoderConfig, config: &DetectorConfig, classes: Vec<CategoryId>, seed: u64) -> Result<Self> {
        encoder.validate()?;
        config.validate(encoder.patch_size)?;
        if classes.is_empty() {
            return Err(ModelError::Param("detector needs at least one class".into()));
        }
        let vb = VarBuilder::new(seed, DType::F32);
        let d = encoder.embed_dim;
        let c = if config.channels == 0 { d } else { config.channels };
        let backbone = VisionEncoder::new(&vb.pp("vision"), encoder)?;
        let pyramid = SimplePyramid::new(&vb.pp("pyramid"), d, c, encoder.patch_size, &config.pyramid_strides)?;
        let head = DenseHead::new(&vb.pp("head"), c, classes.len(), config.prior_prob)?;
        Ok(Self {
            encoder: encoder.clone(),
            config: config.clone(),
            backbone,
            pyramid,
            head,
            classes,
            store: vb.finish()?,
        })
    }

    /// Defect categories of the taxonomy, in taxonomy order.
    pub fn classes_for(taxonomy: &Taxonomy) -> Vec<CategoryId> {
        taxonomy.defect_ids()
    }

    /// Copies `vision.*` parameters (e.g. from a pretraining checkpoint).
    pub fn load_backbone(&self, tensors: &BTreeMap<String, Tensor>) -> Result<usize> {
        let vision: BTreeMap<String, Tensor> =
            tensors.iter().filter(|(k, _)| k.starts_with("vision.")).map(|(k, v)| (k.clone(), v.clone())).collect();
        let expected = self.store.names_with_prefix("vision.").len();
        if vision.len() != expected {
            return Err(ModelError::Param(format!("backbone has {expected} tensors, source provides {}", vision.len())));
        }
        self.store.load(&vision, false)?;
        Ok(vision.len())
    }

    pub fn forward(&self, images: &Tensor) -> Result<Vec<LevelOutput>> {
        let fm = self.backbone.backbone_features(images)?;
        self.forward_features(&fm)
    }

    pub fn forward_features(&self, fm: &Tensor) -> Result<Vec<LevelOutput>> {
        let maps = self.pyramid.forward(fm)?;
        maps.iter()
            .zip(self.pyramid.strides())
            .map(|(x, stride)| {
                let h = gelu(&self.head.conv.forward(x)?)?;
                Ok(LevelOutput {
                    stride,
                    cls_logits: self.head.cls.forward(&h)?,
                    ltrb: decode_distances(&self.head.reg.forward(&h)?, stride)?,
                })
            })
            .collect()
    }

    pub fn optimizer(&self) -> Result<AdamW> {
        let c = &self.config;
        AdamW::new(
            &self.store,
            vec![
                GroupSpec::new("backbone", &["vision."], c.backbone_lr, c.weight_decay),
                GroupSpec::new("decoder", &["pyramid.", "head."], c.decoder_lr, c.weight_decay),
            ],
            AdamConfig { max_grad_norm: c.max_grad_norm, ..AdamConfig::default() },
        )
    }

    /// Detections per image in that image's own pixel coordinates.
    pub fn predict(&self, images: &[&RgbImage]) -> Result<Vec<Vec<Detection>>> {
        let (h, w) = self.config.input_size;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let x = images_to_tensor(chunk, (h, w), DType::F32)?;
            let levels = self.forward(&x)?;
            for (b, img) in chunk.iter().enumerate() {
                let (iw, ih) = img.dimensions();
                let sx = iw as f64 / w as f64;
                let sy = ih as f64 / h as f64;
                let raw = decode_image(&levels, b, (h, w), self.config.score_threshold)?;
                let dets: Vec<Detection> = raw
                    .into_iter()
                    .filter_map(|(bbox, score, k)| {
                        let bbox = bbox.scale(sx, sy);
                        let bbox = BBox::new(
                            bbox.x_min.clamp(0.0, iw as f64),
                            bbox.y_min.clamp(0.0, ih as f64),
                            bbox.x_max.clamp(0.0, iw as f64),
                            bbox.y_max.clamp(0.0, ih as f64),
                        );
                        bbox.is_valid().then_some(Detection { bbox, score, category: self.classes[k] })
                    })
                    .collect();
                out.push(nms(&dets, self.config.nms_iou, self.config.max_detections));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, meta: &DetectorMeta, taxonomy: &Taxonomy) -> Result<()> {
        let mut meta = meta.clone();
        meta.kind = DETECTOR_KIND.into();
        meta.encoder = self.encoder.clone();
        meta.detector = self.config.clone();
        meta.classes = self.classes.iter().map(|&c| taxonomy.get(c).map(|c| c.name.clone())).collect::<std::result::Result<_, _>>()?;
        let meta = serde_json::to_value(&meta).map_err(|e| ModelError::Checkpoint { path: path.into(), msg: e.to_string() })?;
        save_checkpoint(path, &Checkpoint { meta, tensors: self.store.snapshot() })
    }

    pub fn load(path: &Path, taxonomy: &Taxonomy) -> Result<(Self, DetectorMeta)> {
        let ckpt = load_checkpoint(path)?;
        let meta: DetectorMeta = serde_json::from_value(ckpt.meta)
            .map_err(|e| ModelError::Checkpoint { path: path.into(), msg: format!("not a detector checkpoint: {e}") })?;
        if meta.kind != DETECTOR_KIND {
            return Err(ModelError::Checkpoint { path: path.into(), msg: format!("kind {} is not {DETECTOR_KIND}", meta.kind) });
        }
        let classes = meta.classes.iter().map(|n| taxonomy.id(n)).collect::<std::result::Result<Vec<_>, _>>()?;
        let det = Self::new(&meta.encoder, &meta.detector, classes, 0)?;
        det.store.load(&ckpt.tensors, true)?;
        Ok((det, meta))
    }
}

/// Thresholded candidates of image `b` as (box, score, class index), before NMS.
pub fn decode_image(levels: &[LevelOutput], b: usize, size: (usize, usize), threshold: f64) -> Result<Vec<(BBox, f64, usize)>> {
    let mut out = Vec::new();
    for lvl in levels {
        let scores = sigmoid(&lvl.cls_logits.get(b)?)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let ltrb = lvl.ltrb.get(b)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let s = lvl.stride as f64;
        for (k, plane) in scores.iter().enumerate() {
            for (y, row) in plane.iter().enumerate() {
                for (x, &p) in row.iter().enumerate() {
                    if p < threshold {
                        continue;
                    }
                    let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                    let bbox = BBox::new(
                        (cx - ltrb[0][y][x]).max(0.0),
                        (cy - ltrb[1][y][x]).max(0.0),
                        (cx + ltrb[2][y][x]).min(size.1 as f64),
                        (cy + ltrb[3][y][x]).min(size.0 as f64),
                    );
                    if bbox.is_valid() {
                        out.push((bbox, p, k));
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- assignment and loss

/// Max-side ranges per level: level i nominally sees objects of side
/// 4 * stride_i; boundaries are geometric means of neighbouring nominal sides.
pub fn scale_ranges(strides: &[usize]) -> Vec<(f64, f64)> {
    let nominal: Vec<f64> = strides.iter().map(|&s| 4.0 * s as f64).collect();
    (0..strides.len())
        .map(|i| {
            let lo = if i == 0 { 0.0 } else { (nominal[i - 1] * nominal[i]).sqrt() };
            let hi = if i + 1 == strides.len() { f64::INFINITY } else { (nominal[i] * nominal[i + 1]).sqrt() };
            (lo, hi)
        })
        .collect()
}

/// Level index for a box: the first level with `lo < side <= hi`, so a side
/// equal to a boundary goes to the lower stride.
pub fn level_for(side: f64, ranges: &[(f64, f64)]) -> usize {
    ranges.iter().position(|&(_, hi)| side <= hi).unwrap_or(ranges.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    /// Row in the flattened location order.
    pub loc: usize,
    pub class: usize,
    pub gt: BBox,
    pub center: (f64, f64),
}

/// Targets for a batch. Locations are ordered level by level, then image,
/// row, column.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub n_loc: usize,
    pub classes: usize,
    /// Row-major (n_loc, classes) 0/1 targets.
    pub cls_targets: Vec<f32>,
    pub positives: Vec<Positive>,
}

/// `levels` holds (stride, h, w); `gts[b]` holds (box, class index) in input pixels.
pub fn assign_targets(
    levels: &[(usize, usize, usize)],
    gts: &[Vec<(BBox, usize)>],
    classes: usize,
    radius: usize,
) -> Result<Assignment> {
    let batch = gts.len();
    let strides: Vec<usize> = levels.iter().map(|l| l.0).collect();
    let ranges = scale_ranges(&strides);
    let mut offsets = Vec::with_capacity(levels.len());
    let mut n_loc = 0;
    for &(_, h, w) in levels {
        offsets.push(n_loc);
        n_loc += batch * h * w;
    }
    // loc -> (area, class, gt)
    let mut owner: BTreeMap<usize, (f64, usize, BBox)> = BTreeMap::new();
    for (b, boxes) in gts.iter().enumerate() {
        for &(gt, class) in boxes {
            if class >= classes {
                return Err(ModelError::Param(format!("class {class} out of {classes}")));
            }
            if !gt.is_valid() {
                return Err(ModelError::Param(format!("invalid box {gt:?}")));
            }
            let li = level_for(gt.width().max(gt.height()), &ranges);
            let (s, h, w) = levels[li];
            let s = s as f64;
            let (cx, cy) = gt.center();
            let ci = ((cx / s).floor() as usize).min(w - 1);
            let cj = ((cy / s).floor() as usize).min(h - 1);
            let r = radius as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (ci as isize + dx, cj as isize + dy);
                    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                        continue;
                    }
                    let (x, y) = (x as usize, y as usize);
                    let (px, py) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                    let is_center = dx == 0 && dy == 0;
                    let inside = px > gt.x_min && px < gt.x_max && py > gt.y_min && py < gt.y_max;
                    if !(is_center || inside) {
                        continue;
                    }
                    let loc = offsets[li] + b * h * w + y * w + x;
                    let area = gt.area();
                    match owner.get(&loc) {
                        Some(&(a, _, _)) if a <= area => {}
                        _ => {
                            owner.insert(loc, (area, class, gt));
                        }
                    }
                }
            }
        }
    }
    let mut cls_targets = vec![0f32; n_loc * classes];
    let mut positives = Vec::with_capacity(owner.len());
    for (&loc, &(_, class, gt)) in &owner {
        cls_targets[loc * classes + class] = 1.0;
        let li = offsets.iter().rposition(|&o| o <= loc).expect("offset 0 exists");
        let (s, h, w) = levels[li];
        let within = (loc - offsets[li]) % (h * w);
        let (y, x) = (within / w, within % w);
        let s = s as f64;
        positives.push(Positive { loc, class, gt, center: ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s) });
    }
    Ok(Assignment { n_loc, classes, cls_targets, positives })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetLossBreakdown {
    pub cls: f64,
    pub bbox: f64,
    pub total: f64,
    pub positives: usize,
}

/// Level outputs flattened to (n_loc, m) logits and (n_loc, 4) distances.
pub fn flatten_outputs(levels: &[LevelOutput]) -> Result<(Tensor, Tensor)> {
    let mut cls = Vec::with_capacity(levels.len());
    let mut reg = Vec::with_capacity(levels.len());
    for l in levels {
        let (b, m, h, w) = l.cls_logits.dims4()?;
        cls.push(l.cls_logits.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h * w, m))?);
        reg.push(l.ltrb.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h * w, 4))?);
    }
    Ok((Tensor::cat(&cls, 0)?, Tensor::cat(&reg, 0)?))
}

/// Sigmoid focal loss summed over all locations and classes plus
/// `box_weight * (1 - GIoU)` summed over positives, both divided by
/// max(1, #positives).
pub fn detection_loss(
    levels: &[LevelOutput],
    assignment: &Assignment,
    alpha: f64,
    gamma: f64,
    box_weight: f64,
) -> Result<(Tensor, DetLossBreakdown)> {
    let (logits, ltrb) = flatten_outputs(levels)?;
    let (n, m) = logits.dims2()?;
    if n != assignment.n_loc || m != assignment.classes {
        return Err(ModelError::Shape(format!("outputs ({n}, {m}) vs targets ({}, {})", assignment.n_loc, assignment.classes)));
    }
    let dtype = logits.dtype();
    let norm = assignment.positives.len().max(1) as f64;
    let z = Tensor::from_vec(assignment.cls_targets.clone(), (n, m), &Device::Cpu)?.to_dtype(dtype)?;
    let p = sigmoid(&logits)?;
    let ce = ((logits.relu()? - logits.mul(&z)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let one_minus_z = (z.neg()? + 1.0)?;
    let p_t = (p.mul(&z)? + (p.neg()? + 1.0)?.mul(&one_minus_z)?)?;
    let modulator = (p_t.neg()? + 1.0)?.powf(gamma)?;
    let alpha_t = ((&z * alpha)? + (&one_minus_z * (1.0 - alpha))?)?;
    let cls = (alpha_t.mul(&modulator)?.mul(&ce)?.sum_all()? / norm)?;

    let (bbox_loss, total) = if assignment.positives.is_empty() {
        (Tensor::zeros((), dtype, &Device::Cpu)?, cls.clone())
    } else {
        let giou = giou_positive(&ltrb, &assignment.positives)?;
        let bbox = ((giou.neg()? + 1.0)?.sum_all()? / norm)?;
        let total = (&cls + (&bbox * box_weight)?)?;
        (bbox, total)
    };
    let breakdown = DetLossBreakdown {
        cls: scalar(&cls)?,
        bbox: scalar(&bbox_loss)?,
        total: scalar(&total)?,
        positives: assignment.positives.len(),
    };
    Ok((total, breakdown))
}

/// GIoU of each positive's predicted box with its GT box, shape (P,).
fn giou_positive(ltrb: &Tensor, positives: &[Positive]) -> Result<Tensor> {
    let dtype = ltrb.dtype();
    let p = positives.len();
    let idx = Tensor::from_vec(positives.iter().map(|q| q.loc as u32).collect::<Vec<_>>(), p, &Device::Cpu)?;
    let d = ltrb.index_select(&idx, 0)?;
    let col = |t: &Tensor, i: usize| t.narrow(1, i, 1).and_then(|c| c.squeeze(1));
    let konst = |f: &dyn Fn(&Positive) -> f64| -> Result<Tensor> {
        Ok(Tensor::from_vec(positives.iter().map(f).collect::<Vec<_>>(), p, &Device::Cpu)?.to_dtype(dtype)?)
    };
    let (cx, cy) = (konst(&|q| q.center.0)?, konst(&|q| q.center.1)?);
    let (gx0, gy0) = (konst(&|q| q.gt.x_min)?, konst(&|q| q.gt.y_min)?);
    let (gx1, gy1) = (konst(&|q| q.gt.x_max)?, konst(&|q| q.gt.y_max)?);
    let (l, t, r, b) = (col(&d, 0)?, col(&d, 1)?, col(&d, 2)?, col(&d, 3)?);
    let px0 = (&cx - &l)?;
    let py0 = (&cy - &t)?;
    let px1 = (&cx + &r)?;
    let py1 = (&cy + &b)?;
    let iw = (px1.minimum(&gx1)? - px0.maximum(&gx0)?)?.relu()?;
    let ih = (py1.minimum(&gy1)? - py0.maximum(&gy0)?)?.relu()?;
    let inter = iw.mul(&ih)?;
    let area_p = ((&l + &r)?.mul(&(&t + &b)?))?;
    let area_g = ((&gx1 - &gx0)?.mul(&(&gy1 - &gy0)?))?;
    let union = ((area_p + area_g)? - &inter)?;
    let iou = inter.div(&union)?;
    let ew = (px1.maximum(&gx1)? - px0.minimum(&gx0)?)?;
    let eh = (py1.maximum(&gy1)? - py0.minimum(&gy0)?)?;
    let enclose = ew.mul(&eh)?;
    Ok((iou - (&enclose - &union)?.div(&enclose)?)?)
}

// ---------------------------------------------------------------- training

/// One training scene: image plus (box, class index) for defect objects.
#[derive(Debug, Clone)]
pub struct DetSample {
    pub image: RgbImage,
    pub boxes: Vec<(BBox, usize)>,
}

/// Normal-status objects are dropped (they are background for the detector).
pub fn samples_from_scenes(scenes: &[DetectionScene], taxonomy: &Taxonomy, classes: &[CategoryId]) -> Result<Vec<DetSample>> {
    scenes
        .iter()
        .map(|s| {
            let mut boxes = Vec::new();
            for (i, &label) in s.labels.iter().enumerate() {
                if taxonomy.get(label)?.status == Status::Normal {
                    continue;
                }
                let k = classes
                    .iter()
                    .position(|&c| c == label)
                    .ok_or_else(|| ModelError::Param(format!("category {label:?} is not a detection class")))?;
                boxes.push((s.bbox(i), k));
            }
            Ok(DetSample { image: s.image.clone(), boxes })
        })
        .collect()
}

/// Images of `samples` resized to `size`, with boxes scaled accordingly.
pub struct ResizedSet {
    pub images: Tensor,
    pub boxes: Vec<Vec<(BBox, usize)>>,
    pub size: (usize, usize),
}

impl ResizedSet {
    pub fn new(samples: &[DetSample], size: (usize, usize)) -> Result<Self> {
        let refs: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
        let images = images_to_tensor(&refs, size, DType::F32)?;
        let boxes = samples
            .iter()
            .map(|s| {
                let (iw, ih) = s.image.dimensions();
                let (sx, sy) = (size.1 as f64 / iw as f64, size.0 as f64 / ih as f64);
                s.boxes.iter().map(|&(b, k)| (b.scale(sx, sy), k)).collect()
            })
            .collect();
        Ok(Self { images, boxes, size })
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<Vec<(BBox, usize)>>)> {
        let t = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        Ok((self.images.index_select(&t, 0)?, idx.iter().map(|&i| self.boxes[i].clone()).collect()))
    }
}

impl Detector {
    pub fn batch_loss(&self, images: &Tensor, gts: &[Vec<(BBox, usize)>]) -> Result<(Tensor, DetLossBreakdown)> {
        let levels = self.forward(images)?;
        let shapes: Vec<(usize, usize, usize)> = levels
            .iter()
            .map(|l| {
                let d = l.cls_logits.dims();
                (l.stride, d[2], d[3])
            })
            .collect();
        let a = assign_targets(&shapes, gts, self.classes.len(), self.config.center_radius)?;
        let c = &self.config;
        detection_loss(&levels, &a, c.focal_alpha, c.focal_gamma, c.box_weight)
    }

    /// Mean loss over `set` in fixed order.
    pub fn evaluate_loss(&self, set: &ResizedSet) -> Result<f64> {
        let n = set.boxes.len();
        let mut total = 0.0;
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(self.config.batch_size) {
            let (x, gts) = set.batch(chunk)?;
            total += self.batch_loss(&x, &gts)?.1.total * chunk.len() as f64;
        }
        Ok(total / n.max(1) as f64)
    }
}

/// Trains for `det.config.epochs`; returns the mean loss of each epoch.
pub fn train_detector(
    det: &Detector,
    opt: &mut AdamW,
    samples: &[DetSample],
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(ModelError::Batch("no training scenes".into()));
    }
    let cfg = &det.config;
    let sizes = cfg.train_sizes(det.encoder.patch_size);
    let sets: Vec<ResizedSet> = sizes.iter().map(|&s| ResizedSet::new(samples, s)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut means = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let set = &sets[rng.random_range(0..sets.len())];
            let (x, gts) = set.batch(chunk)?;
            let (loss, b) = det.batch_loss(&x, &gts)?;
            if !b.total.is_finite() {
                return Err(ModelError::NumericFailure { stage: "detector".into(), epoch, step, batch: chunk.to_vec() });
            }
            opt.step(&loss.backward()?)?;
            sum += b.total * chunk.len() as f64;
        }
        let mean = sum / samples.len() as f64;
        log::info!("detector epoch {epoch}: loss {mean:.4}");
        on_epoch(epoch, mean);
        means.push(mean);
    }
    Ok(means)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_levels() {
        let r = scale_ranges(&[8, 16, 32]);
        assert!((r[0].1 - 45.254833995939045).abs() < 1e-9);
        assert!((r[1].1 - 90.50966799187809).abs() < 1e-9);
        assert_eq!(level_for(30.0, &r), 0);
        assert_eq!(level_for(r[0].1, &r), 0);
        assert_eq!(level_for(60.0, &r), 1);
        assert_eq!(level_for(500.0, &r), 2);
    }

    #[test]
    fn multiscale_defaults() {
        assert_eq!(multiscale_sizes((256, 256), 32), [(192, 192), (256, 256), (320, 320)]);
        assert_eq!(DetectorConfig::default().train_sizes(16), [(192, 192), (256, 256), (320, 320)]);
    }

    #[test]
    fn config_validation() {
        let mut c = DetectorConfig::default();
        assert!(c.validate(16).is_ok());
        c.pyramid_strides = vec![16, 8];
        assert!(c.validate(16).is_err());
        c.pyramid_strides = vec![12];
        assert!(c.validate(16).is_err());
        c = DetectorConfig { input_size: (250, 256), ..Default::default() };
        assert!(c.validate(16).is_err());
        c = DetectorConfig { score_threshold: 1.0, ..Default::default() };
        assert!(c.validate(16).is_err());
    }

    #[test]
    fn center_assignment_and_conflicts() {
        let levels = [(8, 8, 8), (16, 4, 4)];
        // 20 px box centred at (20, 20) -> stride 8, cell (2, 2)
        let a = assign_targets(&levels, &[vec![(BBox::new(10.0, 10.0, 30.0, 30.0), 1)]], 3, 0).unwrap();
        assert_eq!(a.positives.len(), 1);
        assert_eq!(a.positives[0].loc, 2 * 8 + 2);
        assert_eq!(a.positives[0].center, (20.0, 20.0));
        assert_eq!(a.cls_targets.iter().filter(|&&v| v == 1.0).count(), 1);
        // 60 px box -> stride 16 level, offset 64
        let a = assign_targets(&levels, &[vec![(BBox::new(2.0, 2.0, 62.0, 62.0), 0)]], 3, 0).unwrap();
        assert_eq!(a.positives[0].loc, 64 + 32 / 16 * 4 + 32 / 16);
        // two boxes on the same centre cell: the smaller one owns it
        let a = assign_targets(
            &levels,
            &[vec![(BBox::new(4.0, 4.0, 40.0, 40.0), 0), (BBox::new(18.0, 18.0, 26.0, 26.0), 2)]],
            3,
            0,
        )
        .unwrap();
        assert_eq!(a.positives.len(), 1);
        assert_eq!(a.positives[0].class, 2);
        // radius 1 adds neighbours whose centres fall inside the box
        let a = assign_targets(&levels, &[vec![(BBox::new(10.0, 10.0, 30.0, 30.0), 1)]], 3, 1).unwrap();
        assert_eq!(a.positives.len(), 9);
        let a = assign_targets(&levels, &[vec![(BBox::new(17.0, 17.0, 23.0, 23.0), 1)]], 3, 1).unwrap();
        assert_eq!(a.positives.len(), 1);
    }
}
