//! Axis-aligned box arithmetic, intersection-over-union and greedy
//! per-class non-maximum suppression.
//!
//! Boxes are kept in center form (`cx`, `cy`, `w`, `h`) in normalized image
//! units. Zero-area boxes are legal; they have IoU 0 against everything.

use std::cmp::Ordering;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxGeometry {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxGeometry {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Builds a box from `(x1, y1, x2, y2)` corners.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BoxGeometry) -> f64 {
        iou(self, other)
    }
}

/// A decoded detection: class, box in image coordinates and a non-negative score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: BoxGeometry,
    pub score: f64,
}

/// Intersection area over union area. Returns 0 when the union is empty.
pub fn iou(a: &BoxGeometry, b: &BoxGeometry) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    // areas from corners so that identical boxes give exactly 1
    let area = |x1: f64, y1: f64, x2: f64, y2: f64| (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
    let union = area(ax1, ay1, ax2, ay2) + area(bx1, by1, bx2, by2) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Orders detection indices by descending score, then class, then input position.
pub(crate) fn ranking(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(Ordering::Equal)
            .then(dets[i].class_id.cmp(&dets[j].class_id))
            .then(i.cmp(&j))
    });
    order
}

/// Greedy per-class non-maximum suppression.
///
/// A detection survives iff its IoU with every already-kept detection of the
/// same class is strictly below `iou_threshold`. Detections of different
/// classes never suppress each other. The output is in ranking order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for idx in ranking(dets) {
        let cand = &dets[idx];
        let clear = kept
            .iter()
            .filter(|k| k.class_id == cand.class_id)
            .all(|k| iou(&k.bbox, &cand.bbox) < iou_threshold);
        if clear {
            kept.push(*cand);
        }
    }
    kept
}
