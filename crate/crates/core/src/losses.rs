//! Training objective: detection loss on the final frame, confidence-weighted
//! similarity to the pseudo-labels, category-level weak supervision at every
//! step, and smoothness between consecutive predictions.
//!
//! Every function works on flat frames (see [`crate::grid`] for the layout)
//! and returns the value together with its gradient with respect to the
//! predictions.
//!
//! Cell confidence `Ĉ` used as a weight is the maximum box confidence,
//! clamped at zero. Its gradient reaches only the arg-max box (lowest index
//! on ties) and vanishes while the clamp is active.

use crate::error::{Error, Result};
use crate::grid::{responsible_box_flat, GroundTruthFrame, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub detection: f64,
    pub similarity: f64,
    pub category: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.detection += other.detection;
        self.similarity += other.similarity;
        self.category += other.category;
        self.consistency += other.consistency;
        self.total += other.total;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            detection: self.detection * k,
            similarity: self.similarity * k,
            category: self.category * k,
            consistency: self.consistency * k,
            total: self.total * k,
        }
    }
}

fn check_frame(v: &[f64], cfg: &ModelConfig, what: &str) -> Result<()> {
    if v.len() != cfg.frame_len() {
        return Err(Error::dim(what, cfg.frame_len(), v.len()));
    }
    Ok(())
}

fn check_sequence<V: AsRef<[f64]>>(seq: &[V], cfg: &ModelConfig, what: &str) -> Result<()> {
    for (t, v) in seq.iter().enumerate() {
        check_frame(v.as_ref(), cfg, &format!("{what} step {t}"))?;
    }
    Ok(())
}

/// Clamped cell confidence and the box index it came from.
#[inline]
fn weight(frame: &[f64], cfg: &ModelConfig, cell: usize) -> (f64, usize) {
    let mut best = 0;
    let mut top = frame[cfg.conf_index(cell, 0)];
    for j in 1..cfg.b {
        let v = frame[cfg.conf_index(cell, j)];
        if v > top {
            top = v;
            best = j;
        }
    }
    (top.max(0.0), best)
}

/// Multi-part detection loss on one frame.
///
/// Object cells supervise coordinates, square-root sizes and confidence of
/// their responsible box plus the class probabilities; every other box is
/// pushed towards zero confidence with weight `lambda_noobj`. The
/// responsible-box choice is treated as a constant when differentiating.
pub fn detection_loss(pred: &[f64], gt: &GroundTruthFrame, cfg: &ModelConfig) -> Result<(f64, Vec<f64>)> {
    check_frame(pred, cfg, "prediction")?;
    if gt.grid.len() != cfg.cells() {
        return Err(Error::dim("ground-truth cells", cfg.cells(), gt.grid.len()));
    }
    let (lc, ln) = (cfg.lambda_coord, cfg.lambda_noobj);
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];

    for (i, target) in gt.grid.iter().enumerate() {
        let responsible = target.map(|t| responsible_box_flat(pred, cfg, i, &t.image));
        for j in 0..cfg.b {
            let ci = cfg.conf_index(i, j);
            if responsible != Some(j) {
                loss += ln * pred[ci] * pred[ci];
                grad[ci] += 2.0 * ln * pred[ci];
            }
        }
        let (Some(t), Some(j)) = (target, responsible) else {
            continue;
        };
        let o = cfg.box_offset(i, j);
        for (k, goal) in [(0, t.local.cx), (1, t.local.cy)] {
            let d = pred[o + k] - goal;
            loss += lc * d * d;
            grad[o + k] += 2.0 * lc * d;
        }
        for (k, goal) in [(2, t.local.w), (3, t.local.h)] {
            let root = pred[o + k].max(0.0).sqrt();
            let d = root - goal.sqrt();
            loss += lc * d * d;
            if pred[o + k] > 0.0 {
                grad[o + k] += lc * d / root;
            }
        }
        let d = pred[o + 4] - 1.0;
        loss += d * d;
        grad[o + 4] += 2.0 * d;

        let co = cfg.class_offset(i);
        for c in 0..cfg.c {
            let goal = if c == t.class_id { 1.0 } else { 0.0 };
            let d = pred[co + c] - goal;
            loss += d * d;
            grad[co + c] += 2.0 * d;
        }
    }
    Ok((loss, grad))
}

/// `Σ_t Σ_i Ĉ_i · ‖x_i − ŷ_i‖²` over whole cell blocks.
pub fn similarity_loss<P: AsRef<[f64]>, Q: AsRef<[f64]>>(
    preds: &[P],
    pseudo: &[Q],
    cfg: &ModelConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if preds.len() != pseudo.len() {
        return Err(Error::dim("pseudo-label steps", preds.len(), pseudo.len()));
    }
    check_sequence(preds, cfg, "prediction")?;
    check_sequence(pseudo, cfg, "pseudo-label")?;
    let n = cfg.cell_len();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (y, x) in preds.iter().zip(pseudo) {
        let (y, x) = (y.as_ref(), x.as_ref());
        let mut g = vec![0.0; y.len()];
        for i in 0..cfg.cells() {
            let (w, jbest) = weight(y, cfg, i);
            let block = i * n..(i + 1) * n;
            let sq: f64 = x[block.clone()]
                .iter()
                .zip(&y[block.clone()])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            loss += w * sq;
            if w > 0.0 {
                for k in block {
                    g[k] += 2.0 * w * (y[k] - x[k]);
                }
                g[cfg.conf_index(i, jbest)] += sq;
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// `Σ_t Σ_c (Σ_i Ĉ_i p̂_i(c) − Σ_i 1obj_i p_i(c))²` against the final-frame truth.
pub fn category_loss<P: AsRef<[f64]>>(
    preds: &[P],
    gt: &GroundTruthFrame,
    cfg: &ModelConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_sequence(preds, cfg, "prediction")?;
    if gt.grid.len() != cfg.cells() {
        return Err(Error::dim("ground-truth cells", cfg.cells(), gt.grid.len()));
    }
    let target = gt.class_counts(cfg.c);
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for y in preds {
        let y = y.as_ref();
        let weights: Vec<(f64, usize)> = (0..cfg.cells()).map(|i| weight(y, cfg, i)).collect();
        let mut resid: Vec<f64> = target.iter().map(|t| -t).collect();
        for (i, &(w, _)) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let co = cfg.class_offset(i);
            for (c, r) in resid.iter_mut().enumerate() {
                *r += w * y[co + c];
            }
        }
        loss += resid.iter().map(|r| r * r).sum::<f64>();

        let mut g = vec![0.0; y.len()];
        for (i, &(w, jbest)) in weights.iter().enumerate() {
            let co = cfg.class_offset(i);
            let mut dw = 0.0;
            for (c, r) in resid.iter().enumerate() {
                g[co + c] += 2.0 * r * w;
                dw += 2.0 * r * y[co + c];
            }
            if w > 0.0 {
                g[cfg.conf_index(i, jbest)] += dw;
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// `Σ_t ‖ŷ_t − ŷ_{t+1}‖²` over adjacent steps.
pub fn consistency_loss<P: AsRef<[f64]>>(preds: &[P], cfg: &ModelConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    check_sequence(preds, cfg, "prediction")?;
    let mut grads: Vec<Vec<f64>> = preds.iter().map(|p| vec![0.0; p.as_ref().len()]).collect();
    let mut loss = 0.0;
    for t in 1..preds.len() {
        let (a, b) = (preds[t - 1].as_ref(), preds[t].as_ref());
        for k in 0..a.len() {
            let d = a[k] - b[k];
            loss += d * d;
            grads[t - 1][k] += 2.0 * d;
            grads[t][k] -= 2.0 * d;
        }
    }
    Ok((loss, grads))
}

/// Weighted objective `d + α·s + β·c + γ·pc` and its gradient.
///
/// `gt` is the truth of the final step; the detection term only touches
/// the last prediction.
pub fn total_loss<P: AsRef<[f64]>, Q: AsRef<[f64]>>(
    preds: &[P],
    pseudo: &[Q],
    gt: &GroundTruthFrame,
    cfg: &ModelConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let last = preds
        .last()
        .ok_or_else(|| Error::InvalidConfig("empty prediction sequence".into()))?;
    let (d, gd) = detection_loss(last.as_ref(), gt, cfg)?;
    let (s, gs) = similarity_loss(preds, pseudo, cfg)?;
    let (c, gc) = category_loss(preds, gt, cfg)?;
    let (pc, gpc) = consistency_loss(preds, cfg)?;

    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(preds.len());
    for t in 0..preds.len() {
        let g: Vec<f64> = (0..cfg.frame_len())
            .map(|k| cfg.alpha * gs[t][k] + cfg.beta * gc[t][k] + cfg.gamma * gpc[t][k])
            .collect();
        grads.push(g);
    }
    let tail = grads.last_mut().expect("non-empty");
    for (g, v) in tail.iter_mut().zip(&gd) {
        *g += v;
    }

    let total = d + cfg.alpha * s + cfg.beta * c + cfg.gamma * pc;
    Ok((
        LossBreakdown {
            detection: d,
            similarity: s,
            category: c,
            consistency: pc,
            total,
        },
        grads,
    ))
}
