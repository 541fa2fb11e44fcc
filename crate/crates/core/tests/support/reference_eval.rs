//! Second, deliberately naive evaluator used as an oracle for `metrics`.
//!
//! It shares no code with the library: IoU, matching and AP integration are
//! recomputed from scratch with plain loops.

#![allow(dead_code)]

use std::collections::BTreeMap;

/// (x_min, y_min, x_max, y_max)
pub type RefBox = (f64, f64, f64, f64);

pub fn ref_iou(a: RefBox, b: RefBox) -> f64 {
    let iw = a.2.min(b.2) - a.0.max(b.0);
    let ih = a.3.min(b.3) - a.1.max(b.1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let area = |r: RefBox| (r.2 - r.0).max(0.0) * (r.3 - r.1).max(0.0);
    (inter / (area(a) + area(b) - inter)).clamp(0.0, 1.0)
}

/// TP flag per detection of one image, matched within each category.
pub fn ref_match(dets: &[(RefBox, f64, usize)], gts: &[(RefBox, usize)], thr: f64) -> Vec<bool> {
    let mut flags = vec![false; dets.len()];
    let mut used = vec![false; gts.len()];
    let mut visited = vec![false; dets.len()];
    for _ in 0..dets.len() {
        // highest score, lowest index among unvisited
        let mut pick = usize::MAX;
        for i in 0..dets.len() {
            if visited[i] {
                continue;
            }
            if pick == usize::MAX || dets[i].1 > dets[pick].1 {
                pick = i;
            }
        }
        visited[pick] = true;
        let mut best = None;
        let mut best_iou = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.1 != dets[pick].2 {
                continue;
            }
            let v = ref_iou(dets[pick].0, gt.0);
            if v >= thr && v > best_iou {
                best_iou = v;
                best = Some(g);
            }
        }
        if let Some(g) = best {
            used[g] = true;
            flags[pick] = true;
        }
    }
    flags
}

/// AP as the sum over recall steps of the best precision at or beyond that recall.
pub fn ref_ap(mut ranked: Vec<(f64, bool)>, n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if ranked.is_empty() { None } else { Some(0.0) };
    }
    // stable sort keeps pooled order among equal scores
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, (_, hit)) in ranked.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for k in 0..points.len() {
        let r = points[k].0;
        if r > last_recall {
            let best = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (r - last_recall) * best;
            last_recall = r;
        }
    }
    Some(ap)
}

pub struct RefReport {
    /// category -> AP per threshold
    pub per_category: BTreeMap<usize, Vec<Option<f64>>>,
    pub map50: f64,
    pub map75: f64,
    pub map50_95: f64,
}

/// `defects` lists the categories that count; GT of other categories is dropped.
pub fn ref_evaluate(
    dets: &BTreeMap<String, Vec<(RefBox, f64, usize)>>,
    gts: &BTreeMap<String, Vec<(RefBox, usize)>>,
    defects: &[usize],
) -> RefReport {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut keys: Vec<&String> = dets.keys().chain(gts.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut per_category: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
    for &c in defects {
        let mut aps = Vec::new();
        for &thr in &thresholds {
            let mut ranked = Vec::new();
            let mut n_gt = 0;
            for key in &keys {
                let d = dets.get(*key).cloned().unwrap_or_default();
                let g: Vec<(RefBox, usize)> = gts
                    .get(*key)
                    .cloned()
                    .unwrap_or_default()
                    .into_iter()
                    .filter(|x| defects.contains(&x.1))
                    .collect();
                n_gt += g.iter().filter(|x| x.1 == c).count();
                let flags = ref_match(&d, &g, thr);
                for (i, det) in d.iter().enumerate() {
                    if det.2 == c {
                        ranked.push((det.1, flags[i]));
                    }
                }
            }
            aps.push(ref_ap(ranked, n_gt));
        }
        per_category.insert(c, aps);
    }
    let used: Vec<&Vec<Option<f64>>> = per_category.values().filter(|v| v[0].is_some()).collect();
    let mean = |t: usize| {
        if used.is_empty() {
            0.0
        } else {
            used.iter().map(|v| v[t].unwrap()).sum::<f64>() / used.len() as f64
        }
    };
    let all: Vec<f64> = (0..10).map(mean).collect();
    RefReport {
        per_category,
        map50: all[0],
        map75: all[5],
        map50_95: all.iter().sum::<f64>() / 10.0,
    }
}

/// Random evaluation case over `categories`: per image a few GT boxes and
/// detections that are jittered copies of GT, duplicates or pure noise.
pub fn random_case<R: rand::Rng>(
    rng: &mut R,
    images: usize,
    categories: &[usize],
) -> (
    BTreeMap<String, Vec<(RefBox, f64, usize)>>,
    BTreeMap<String, Vec<(RefBox, usize)>>,
) {
    let mut dets = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for i in 0..images {
        let key = format!("scene_{i:04}.png");
        let mut g = Vec::new();
        for _ in 0..rng.random_range(0..5) {
            let x = rng.random_range(0.0..200.0);
            let y = rng.random_range(0.0..200.0);
            let w = rng.random_range(8.0..60.0);
            let h = rng.random_range(8.0..60.0);
            g.push(((x, y, x + w, y + h), categories[rng.random_range(0..categories.len())]));
        }
        let mut d = Vec::new();
        for &(b, c) in &g {
            for _ in 0..rng.random_range(0..3) {
                let j = |v: f64, s: f64, r: &mut R| v + r.random_range(-0.25..0.25) * s;
                let (w, h) = (b.2 - b.0, b.3 - b.1);
                let x0 = j(b.0, w, rng);
                let y0 = j(b.1, h, rng);
                let x1 = (j(b.2, w, rng)).max(x0 + 1.0);
                let y1 = (j(b.3, h, rng)).max(y0 + 1.0);
                let c = if rng.random_bool(0.85) { c } else { categories[rng.random_range(0..categories.len())] };
                // coarse scores make ties common
                let score = (rng.random_range(0..20) as f64) / 20.0;
                d.push(((x0, y0, x1, y1), score, c));
            }
        }
        for _ in 0..rng.random_range(0..3) {
            let x = rng.random_range(0.0..200.0);
            let y = rng.random_range(0.0..200.0);
            d.push(((x, y, x + 30.0, y + 30.0), rng.random_range(0.0..1.0), categories[rng.random_range(0..categories.len())]));
        }
        if !g.is_empty() || rng.random_bool(0.5) {
            gts.insert(key.clone(), g);
        }
        if !d.is_empty() {
            dets.insert(key, d);
        }
    }
    (dets, gts)
}
