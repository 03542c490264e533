//! Per-class average precision (11-point interpolation) and mAP.
//!
//! Detections are matched greedily per frame, then pooled across frames per
//! class before ranking.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{iou, Detection};
use crate::grid::LabeledObject;

/// IoU needed for a detection to count as a hit.
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredHit {
    pub class_id: usize,
    pub score: f64,
    pub true_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// In input order.
    pub detections: Vec<ScoredHit>,
    /// Ground-truth boxes per class.
    pub gt_counts: Vec<usize>,
}

impl MatchResult {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            detections: Vec::new(),
            gt_counts: vec![0; num_classes],
        }
    }

    /// Appends another frame's results (frame order is kept for tie-breaking).
    pub fn extend(&mut self, other: &MatchResult) {
        if self.gt_counts.len() < other.gt_counts.len() {
            self.gt_counts.resize(other.gt_counts.len(), 0);
        }
        for (a, b) in self.gt_counts.iter_mut().zip(&other.gt_counts) {
            *a += b;
        }
        self.detections.extend_from_slice(&other.detections);
    }
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Matches one frame's detections against its truth.
///
/// Per class, detections are visited by descending score (input order on
/// ties). Each claims the unmatched same-class box of highest IoU if that IoU
/// reaches `iou_thresh`; otherwise it is a false positive.
pub fn match_detections(
    dets: &[Detection],
    truth: &[LabeledObject],
    iou_thresh: f64,
    num_classes: usize,
) -> MatchResult {
    let mut gt_counts = vec![0; num_classes];
    for t in truth {
        if t.class_id < num_classes {
            gt_counts[t.class_id] += 1;
        }
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| by_score_desc(dets[i].score, dets[j].score).then(i.cmp(&j)));

    let mut taken = vec![false; truth.len()];
    let mut hits = vec![false; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (k, t) in truth.iter().enumerate() {
            if taken[k] || t.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &t.bbox);
            if v >= iou_thresh && best.map_or(true, |(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        if let Some((k, _)) = best {
            taken[k] = true;
            hits[i] = true;
        }
    }
    MatchResult {
        detections: dets
            .iter()
            .zip(hits)
            .map(|(d, tp)| ScoredHit {
                class_id: d.class_id,
                score: d.score,
                true_positive: tp,
            })
            .collect(),
        gt_counts,
    }
}

/// 11-point interpolated AP of `class_id` over pooled matches.
///
/// Ranking is by descending score with pooled order breaking ties. A class
/// without ground truth scores 0.
pub fn average_precision(matches: &MatchResult, class_id: usize) -> f64 {
    let n_gt = matches.gt_counts.get(class_id).copied().unwrap_or(0);
    if n_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<&ScoredHit> = matches
        .detections
        .iter()
        .filter(|d| d.class_id == class_id)
        .collect();
    ranked.sort_by(|a, b| by_score_desc(a.score, b.score));

    // (true positives so far, precision) at each rank
    let mut curve = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (rank, d) in ranked.iter().enumerate() {
        if d.true_positive {
            tp += 1;
        }
        curve.push((tp, tp as f64 / (rank + 1) as f64));
    }

    let mut total = 0.0;
    for k in 0..=10usize {
        // recall ≥ k/10  ⇔  10·tp ≥ k·n_gt
        let best = curve
            .iter()
            .filter(|(tp, _)| 10 * tp >= k * n_gt)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 11.0
}

/// Mean over `active` classes.
pub fn mean_ap(per_class_ap: &[f64], active: &[usize]) -> Result<f64> {
    if active.is_empty() {
        return Err(Error::InvalidConfig("mean AP needs at least one class".into()));
    }
    let mut sum = 0.0;
    for &c in active {
        let ap = per_class_ap.get(c).ok_or_else(|| {
            Error::InvalidConfig(format!("class {c} outside AP table of {}", per_class_ap.len()))
        })?;
        sum += ap;
    }
    Ok(sum / active.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub class_id: usize,
    pub ap: f64,
    pub gt: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Scored classes: the requested ones that have ground truth.
    pub classes: Vec<ClassScore>,
    pub map: f64,
}

impl EvalReport {
    /// Scores pooled matches. Requested classes with no ground truth in the
    /// split are left out of the mean; an empty result yields mAP 0.
    pub fn from_matches(matches: &MatchResult, active: &[usize]) -> Self {
        let mut classes = Vec::new();
        for &c in active {
            let gt = matches.gt_counts.get(c).copied().unwrap_or(0);
            if gt == 0 {
                continue;
            }
            classes.push(ClassScore {
                class_id: c,
                ap: average_precision(matches, c),
                gt,
                detections: matches.detections.iter().filter(|d| d.class_id == c).count(),
            });
        }
        let map = if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64
        };
        Self { classes, map }
    }

    pub fn to_text(&self, names: Option<&[String]>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>6} {:>6}", "class", "AP", "gt", "dets");
        for c in &self.classes {
            let name = names
                .and_then(|n| n.get(c.class_id).cloned())
                .unwrap_or_else(|| c.class_id.to_string());
            let _ = writeln!(
                out,
                "{:<12} {:>8.2} {:>6} {:>6}",
                name,
                100.0 * c.ap,
                c.gt,
                c.detections
            );
        }
        let _ = writeln!(out, "{:<12} {:>8.2}", "mAP", 100.0 * self.map);
        out
    }

    /// One `key=value` record per line: `ap ...` rows, then a `map` row.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            let _ = writeln!(
                out,
                "ap class={} value={} gt={} dets={}",
                c.class_id, c.ap, c.gt, c.detections
            );
        }
        let _ = writeln!(out, "map value={} classes={}", self.map, self.classes.len());
        out
    }
}
