//! Precision, recall, AP and mAP over defect categories.
//!
//! Matching is greedy in score order within each image and category: a
//! detection takes the unmatched ground truth with the highest IoU at or above
//! the threshold. AP is the all-points interpolated area under the
//! precision envelope. Categories with neither ground truth nor detections
//! have undefined AP and are left out of the mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::geometry::{BBox, Detection};
use crate::taxonomy::{CategoryId, Status, Taxonomy};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchResult {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

/// Score-ordered detections with their TP flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFlags {
    pub scores: Vec<f64>,
    pub is_tp: Vec<bool>,
}

/// Matches detections of one image against its ground truth, per category.
///
/// Returns the per-category counts and, for each input detection, whether it
/// was a true positive.
pub fn match_detections(
    dets: &[Detection],
    gts: &[(BBox, CategoryId)],
    iou_thr: f64,
) -> (BTreeMap<CategoryId, MatchResult>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    let mut counts: BTreeMap<CategoryId, MatchResult> = BTreeMap::new();
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, (gb, gc)) in gts.iter().enumerate() {
            if taken[g] || *gc != d.category {
                continue;
            }
            let v = d.bbox.iou(gb);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let entry = counts.entry(d.category).or_default();
        if let Some((g, _)) = best {
            taken[g] = true;
            flags[i] = true;
            entry.tp += 1;
        } else {
            entry.fp += 1;
        }
    }
    for (g, (_, gc)) in gts.iter().enumerate() {
        if !taken[g] {
            counts.entry(*gc).or_default().fn_ += 1;
        }
    }
    (counts, flags)
}

/// All-points interpolated AP; `None` when there is nothing to score.
pub fn average_precision(flags: &ScoredFlags, n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if flags.scores.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<usize> = (0..flags.scores.len()).collect();
    order.sort_by(|&a, &b| flags.scores[b].total_cmp(&flags.scores[a]).then(a.cmp(&b)));

    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        tp += flags.is_tp[i] as usize;
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub thresholds: Vec<f64>,
    /// Per defect category, AP at every threshold (`None` = undefined).
    pub per_category_ap: BTreeMap<String, Vec<Option<f64>>>,
    pub map50: f64,
    pub map75: f64,
    pub map50_95: f64,
    /// Number of categories entering the mean.
    pub m: usize,
}

impl APReport {
    pub fn ap50(&self, category: &str) -> Option<f64> {
        self.per_category_ap.get(category).and_then(|v| v[0])
    }

    /// Plain-text table: overall mAP columns, then per-category AP.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mAP50\tmAP75\tmAP50:95\tm");
        let _ = writeln!(
            s,
            "{:.4}\t{:.4}\t{:.4}\t{}",
            self.map50, self.map75, self.map50_95, self.m
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "category\tAP50\tAP75\tAP50:95");
        for (name, aps) in &self.per_category_ap {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            let defined: Vec<f64> = aps.iter().flatten().copied().collect();
            let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            let _ = writeln!(s, "{name}\t{}\t{}\t{}", fmt(aps[0]), fmt(aps[5]), fmt(mean));
        }
        s
    }
}

/// Evaluates detections against ground truth over the taxonomy's defect
/// categories. Ground truth of normal categories is ignored.
pub fn evaluate(
    dets_by_image: &BTreeMap<String, Vec<Detection>>,
    gts_by_image: &BTreeMap<String, Vec<(BBox, CategoryId)>>,
    taxonomy: &Taxonomy,
) -> Result<APReport, EvalError> {
    let defect_ids = taxonomy.defect_ids();
    for (image, dets) in dets_by_image {
        for d in dets {
            let c = taxonomy.get(d.category)?;
            if c.status != Status::Defect {
                return Err(EvalError::NotADefect {
                    image: image.clone(),
                    category: c.name.clone(),
                });
            }
        }
    }
    let mut gt_filtered: BTreeMap<&str, Vec<(BBox, CategoryId)>> = BTreeMap::new();
    for (image, gts) in gts_by_image {
        let mut kept = Vec::with_capacity(gts.len());
        for &(b, c) in gts {
            if taxonomy.get(c)?.status == Status::Defect {
                kept.push((b, c));
            }
        }
        gt_filtered.insert(image, kept);
    }

    let thresholds = coco_thresholds();
    let mut n_gt: BTreeMap<CategoryId, usize> = BTreeMap::new();
    for gts in gt_filtered.values() {
        for (_, c) in gts {
            *n_gt.entry(*c).or_default() += 1;
        }
    }

    let mut per_category: BTreeMap<CategoryId, Vec<Option<f64>>> =
        defect_ids.iter().map(|&c| (c, Vec::with_capacity(10))).collect();
    let empty = Vec::new();
    for &thr in &thresholds {
        let mut pooled: BTreeMap<CategoryId, ScoredFlags> = defect_ids
            .iter()
            .map(|&c| (c, ScoredFlags { scores: vec![], is_tp: vec![] }))
            .collect();
        let images: std::collections::BTreeSet<&str> = dets_by_image
            .keys()
            .map(String::as_str)
            .chain(gt_filtered.keys().copied())
            .collect();
        for image in images {
            let dets = dets_by_image.get(image).unwrap_or(&empty);
            let gts = gt_filtered.get(image).map(Vec::as_slice).unwrap_or(&[]);
            let (_, flags) = match_detections(dets, gts, thr);
            for (d, tp) in dets.iter().zip(flags) {
                let entry = pooled.get_mut(&d.category).expect("validated defect category");
                entry.scores.push(d.score);
                entry.is_tp.push(tp);
            }
        }
        for (c, flags) in pooled {
            let ap = average_precision(&flags, n_gt.get(&c).copied().unwrap_or(0));
            per_category.get_mut(&c).expect("defect category").push(ap);
        }
    }

    let included: Vec<&Vec<Option<f64>>> = per_category.values().filter(|v| v[0].is_some()).collect();
    let m = included.len();
    let mean_at = |t: usize| {
        if m == 0 {
            0.0
        } else {
            included.iter().map(|v| v[t].unwrap_or(0.0)).sum::<f64>() / m as f64
        }
    };
    let maps: Vec<f64> = (0..thresholds.len()).map(mean_at).collect();
    let per_category_ap = per_category
        .into_iter()
        .map(|(c, v)| Ok((taxonomy.get(c)?.name.clone(), v)))
        .collect::<Result<_, EvalError>>()?;

    Ok(APReport {
        thresholds: thresholds.to_vec(),
        per_category_ap,
        map50: maps[0],
        map75: maps[5],
        map50_95: maps.iter().sum::<f64>() / maps.len() as f64,
        m,
    })
}
