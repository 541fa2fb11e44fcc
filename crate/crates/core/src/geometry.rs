use serde::{Deserialize, Serialize};

use crate::taxonomy::CategoryId;

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub category: CategoryId,
}

/// Greedy per-class NMS. Candidates are visited by descending score (ties by
/// lower index); the result is sorted the same way and truncated to `max_keep`.
pub fn nms(dets: &[Detection], iou_threshold: f64, max_keep: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= max_keep {
            break;
        }
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].category == d.category && dets[k].bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_best_duplicate() {
        let b = BBox::new(10.0, 10.0, 30.0, 30.0);
        let dets = [
            Detection { bbox: b, score: 0.8, category: CategoryId(1) },
            Detection { bbox: b, score: 0.9, category: CategoryId(1) },
            Detection { bbox: b, score: 0.7, category: CategoryId(2) },
        ];
        let kept = nms(&dets, 0.5, 10);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].category, CategoryId(2));
        assert_eq!(nms(&dets, 0.5, 1).len(), 1);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if ab == 1.0 {
                prop_assert!((a.x_min - b.x_min).abs() < 1e-9 && (a.y_max - b.y_max).abs() < 1e-9);
            }
        }

        #[test]
        fn nms_output_has_no_overlapping_same_class_pair(
            boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64, 0usize..3), 0..25),
            thr in 0.1..0.9f64,
        ) {
            let dets: Vec<Detection> = boxes
                .into_iter()
                .map(|(bbox, score, c)| Detection { bbox, score, category: CategoryId(c) })
                .collect();
            let kept = nms(&dets, thr, usize::MAX);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.score >= b.score);
                    if a.category == b.category {
                        prop_assert!(a.bbox.iou(&b.bbox) <= thr);
                    }
                }
            }
        }
    }
}
