//! Grid prediction tensors: the structured per-cell form, the flat vector
//! consumed by the recurrent refiner, ground-truth grid targets and decoding
//! into detections.
//!
//! Flat layout (normative for every file format): cells in row-major order;
//! inside a cell, `B` blocks of `(cx, cy, w, h, confidence)` followed by `C`
//! class probabilities. `cx`, `cy` are offsets inside the cell in `[0, 1]`,
//! `w`, `h` are fractions of the whole image.

use crate::error::{Error, Result};
use crate::geometry::{iou, nms, BoxGeometry, Detection};

/// Slack allowed when checking that a ground-truth box fits inside the image.
const BOUNDS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Cells per image side.
    pub s: usize,
    /// Boxes per cell.
    pub b: usize,
    /// Class count.
    pub c: usize,
    /// Sequence length.
    pub t: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    /// A `(cell, class)` pair becomes a detection when its score exceeds this.
    pub detect_threshold: f64,
    pub nms_iou: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            s: 7,
            b: 2,
            c: 20,
            t: 30,
            alpha: 0.2,
            beta: 0.2,
            gamma: 0.1,
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            detect_threshold: 0.1,
            nms_iou: 0.5,
        }
    }
}

impl ModelConfig {
    /// Default weights with a custom grid shape.
    pub fn with_grid(s: usize, b: usize, c: usize, t: usize) -> Self {
        Self {
            s,
            b,
            c,
            t,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("S", self.s), ("B", self.b), ("C", self.c), ("T", self.t)] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda_coord", self.lambda_coord),
            ("lambda_noobj", self.lambda_noobj),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::InvalidConfig(format!(
                "nms_iou must lie in [0, 1], got {}",
                self.nms_iou
            )));
        }
        if !self.detect_threshold.is_finite() {
            return Err(Error::InvalidConfig("detect_threshold must be finite".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.s * self.s
    }

    /// Values per cell: `5B + C`.
    pub fn cell_len(&self) -> usize {
        5 * self.b + self.c
    }

    /// Flat frame length `S²(5B + C)`.
    pub fn frame_len(&self) -> usize {
        self.cells() * self.cell_len()
    }

    /// Flat index of the first coordinate of box `j` in `cell`.
    #[inline]
    pub fn box_offset(&self, cell: usize, j: usize) -> usize {
        cell * self.cell_len() + 5 * j
    }

    /// Flat index of the confidence of box `j` in `cell`.
    #[inline]
    pub fn conf_index(&self, cell: usize, j: usize) -> usize {
        self.box_offset(cell, j) + 4
    }

    /// Flat index of the first class probability of `cell`.
    #[inline]
    pub fn class_offset(&self, cell: usize) -> usize {
        cell * self.cell_len() + 5 * self.b
    }

    /// Same grid shape (S, B, C)?
    pub fn same_grid(&self, other: &ModelConfig) -> bool {
        self.s == other.s && self.b == other.b && self.c == other.c
    }
}

/// Row/column address of a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
}

impl GridCell {
    pub fn from_index(index: usize, s: usize) -> Self {
        Self {
            row: index / s,
            col: index % s,
        }
    }

    pub fn index(&self, s: usize) -> usize {
        self.row * s + self.col
    }

    /// Cell owning an image point. Points on a boundary go to the higher cell;
    /// the far edge clamps to `S - 1`.
    pub fn containing(cx: f64, cy: f64, s: usize) -> Self {
        let pick = |v: f64| ((v * s as f64).floor().max(0.0) as usize).min(s - 1);
        Self {
            row: pick(cy),
            col: pick(cx),
        }
    }

    /// Converts a box with in-cell center offsets to image coordinates.
    pub fn to_image(&self, local: &BoxGeometry, s: usize) -> BoxGeometry {
        let sf = s as f64;
        BoxGeometry {
            cx: (self.col as f64 + local.cx) / sf,
            cy: (self.row as f64 + local.cy) / sf,
            w: local.w,
            h: local.h,
        }
    }

    /// Inverse of [`GridCell::to_image`].
    pub fn to_local(&self, image: &BoxGeometry, s: usize) -> BoxGeometry {
        let sf = s as f64;
        BoxGeometry {
            cx: image.cx * sf - self.col as f64,
            cy: image.cy * sf - self.row as f64,
            w: image.w,
            h: image.h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxPrediction {
    /// Center as in-cell offsets, size image-normalized.
    pub geometry: BoxGeometry,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellPrediction {
    pub boxes: Vec<BoxPrediction>,
    pub class_probs: Vec<f64>,
}

impl CellPrediction {
    pub fn zeros(b: usize, c: usize) -> Self {
        Self {
            boxes: vec![BoxPrediction::default(); b],
            class_probs: vec![0.0; c],
        }
    }
}

/// One frame of grid predictions, cells in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    pub cells: Vec<CellPrediction>,
}

impl FrameTensor {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            cells: vec![CellPrediction::zeros(cfg.b, cfg.c); cfg.cells()],
        }
    }

    pub fn flatten(&self, cfg: &ModelConfig) -> Result<Vec<f64>> {
        flatten(self, cfg)
    }

    pub fn unflatten(v: &[f64], cfg: &ModelConfig) -> Result<Self> {
        unflatten(v, cfg)
    }
}

pub fn flatten(frame: &FrameTensor, cfg: &ModelConfig) -> Result<Vec<f64>> {
    if frame.cells.len() != cfg.cells() {
        return Err(Error::dim("frame cells", cfg.cells(), frame.cells.len()));
    }
    let mut out = Vec::with_capacity(cfg.frame_len());
    for (i, cell) in frame.cells.iter().enumerate() {
        if cell.boxes.len() != cfg.b {
            return Err(Error::dim(format!("boxes in cell {i}"), cfg.b, cell.boxes.len()));
        }
        if cell.class_probs.len() != cfg.c {
            return Err(Error::dim(
                format!("class probabilities in cell {i}"),
                cfg.c,
                cell.class_probs.len(),
            ));
        }
        for bx in &cell.boxes {
            let g = &bx.geometry;
            out.extend_from_slice(&[g.cx, g.cy, g.w, g.h, bx.confidence]);
        }
        out.extend_from_slice(&cell.class_probs);
    }
    Ok(out)
}

pub fn unflatten(v: &[f64], cfg: &ModelConfig) -> Result<FrameTensor> {
    if v.len() != cfg.frame_len() {
        return Err(Error::dim("flat frame length", cfg.frame_len(), v.len()));
    }
    let cells = v
        .chunks_exact(cfg.cell_len())
        .map(|chunk| {
            let (box_part, class_part) = chunk.split_at(5 * cfg.b);
            CellPrediction {
                boxes: box_part
                    .chunks_exact(5)
                    .map(|q| BoxPrediction {
                        geometry: BoxGeometry::new(q[0], q[1], q[2], q[3]),
                        confidence: q[4],
                    })
                    .collect(),
                class_probs: class_part.to_vec(),
            }
        })
        .collect();
    Ok(FrameTensor { cells })
}

/// A labeled object in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledObject {
    pub class_id: usize,
    pub bbox: BoxGeometry,
}

/// Supervision target of an object cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub class_id: usize,
    /// Center as in-cell offsets, size image-normalized.
    pub local: BoxGeometry,
    /// Same box in image coordinates.
    pub image: BoxGeometry,
    /// Index into [`GroundTruthFrame::objects`].
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub objects: Vec<LabeledObject>,
    /// One entry per cell; `Some` marks an object cell.
    pub grid: Vec<Option<CellTarget>>,
}

impl GroundTruthFrame {
    /// Objects that own a grid cell after collision resolution, in cell order.
    pub fn kept_objects(&self) -> impl Iterator<Item = LabeledObject> + '_ {
        self.grid.iter().flatten().map(|t| LabeledObject {
            class_id: t.class_id,
            bbox: t.image,
        })
    }

    pub fn has_object(&self, cell: usize) -> bool {
        self.grid[cell].is_some()
    }

    /// Per-class count of object cells: `Σ_i 1obj_i p_i(c)`.
    pub fn class_counts(&self, c: usize) -> Vec<f64> {
        let mut counts = vec![0.0; c];
        for t in self.grid.iter().flatten() {
            counts[t.class_id] += 1.0;
        }
        counts
    }

    /// Tensor a perfect predictor would emit: box 0 carries the target with
    /// confidence 1, remaining boxes are zero, class probabilities one-hot.
    pub fn ideal_tensor(&self, cfg: &ModelConfig) -> FrameTensor {
        let mut frame = FrameTensor::zeros(cfg);
        for (cell, target) in frame.cells.iter_mut().zip(&self.grid) {
            if let Some(t) = target {
                cell.boxes[0] = BoxPrediction {
                    geometry: t.local,
                    confidence: 1.0,
                };
                cell.class_probs[t.class_id] = 1.0;
            }
        }
        frame
    }

    pub fn ideal_flat(&self, cfg: &ModelConfig) -> Vec<f64> {
        let mut v = vec![0.0; cfg.frame_len()];
        for (i, target) in self.grid.iter().enumerate() {
            if let Some(t) = target {
                let o = cfg.box_offset(i, 0);
                v[o..o + 5].copy_from_slice(&[t.local.cx, t.local.cy, t.local.w, t.local.h, 1.0]);
                v[cfg.class_offset(i) + t.class_id] = 1.0;
            }
        }
        v
    }
}

/// Assigns each object to the cell containing its center. When two centers
/// share a cell the larger box wins (earlier object on equal area).
pub fn encode_ground_truth(objects: &[LabeledObject], cfg: &ModelConfig) -> Result<GroundTruthFrame> {
    let mut grid: Vec<Option<CellTarget>> = vec![None; cfg.cells()];
    for (index, obj) in objects.iter().enumerate() {
        if obj.class_id >= cfg.c {
            return Err(Error::InvalidConfig(format!(
                "object {index} has class {} but C = {}",
                obj.class_id, cfg.c
            )));
        }
        let b = &obj.bbox;
        let (x1, y1, x2, y2) = b.corners();
        let finite = [b.cx, b.cy, b.w, b.h].iter().all(|v| v.is_finite());
        if !finite
            || b.w < 0.0
            || b.h < 0.0
            || x1 < -BOUNDS_TOL
            || y1 < -BOUNDS_TOL
            || x2 > 1.0 + BOUNDS_TOL
            || y2 > 1.0 + BOUNDS_TOL
        {
            return Err(Error::OutOfBounds {
                index,
                detail: format!("cx={} cy={} w={} h={}", b.cx, b.cy, b.w, b.h),
            });
        }
        let cell = GridCell::containing(b.cx, b.cy, cfg.s);
        let slot = &mut grid[cell.index(cfg.s)];
        let replace = match slot {
            None => true,
            Some(prev) => b.area() > prev.image.area(),
        };
        if replace {
            *slot = Some(CellTarget {
                class_id: obj.class_id,
                local: cell.to_local(b, cfg.s),
                image: *b,
                object: index,
            });
        }
    }
    Ok(GroundTruthFrame {
        objects: objects.to_vec(),
        grid,
    })
}

/// Index of the highest-confidence box; the lowest index wins ties.
pub fn best_box(cell: &CellPrediction) -> usize {
    let mut best = 0;
    for (j, b) in cell.boxes.iter().enumerate().skip(1) {
        if b.confidence > cell.boxes[best].confidence {
            best = j;
        }
    }
    best
}

/// Cell objectness: the maximum box confidence.
pub fn cell_confidence(cell: &CellPrediction) -> f64 {
    cell.boxes[best_box(cell)].confidence
}

/// Box with the largest IoU against `gt_box` (image coordinates); ties go to
/// the lowest index.
pub fn responsible_box(cell: &CellPrediction, gt_box: &BoxGeometry, at: GridCell, s: usize) -> usize {
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (j, b) in cell.boxes.iter().enumerate() {
        let v = iou(&at.to_image(&b.geometry, s), gt_box);
        if v > best_iou {
            best = j;
            best_iou = v;
        }
    }
    best
}

/// Same rule as [`responsible_box`], straight off a flat frame.
pub(crate) fn responsible_box_flat(
    frame: &[f64],
    cfg: &ModelConfig,
    cell: usize,
    gt_box: &BoxGeometry,
) -> usize {
    let at = GridCell::from_index(cell, cfg.s);
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for j in 0..cfg.b {
        let o = cfg.box_offset(cell, j);
        let local = BoxGeometry::new(frame[o], frame[o + 1], frame[o + 2], frame[o + 3]);
        let v = iou(&at.to_image(&local, cfg.s), gt_box);
        if v > best_iou {
            best = j;
            best_iou = v;
        }
    }
    best
}

/// Per-cell, per-class detections above threshold, before suppression.
///
/// Each cell contributes its highest-confidence box. Scores are
/// `max(p, 0) * max(conf, 0)`; centers are clamped into their cell and sizes
/// to be non-negative.
pub fn candidate_detections(frame: &FrameTensor, cfg: &ModelConfig) -> Vec<Detection> {
    let mut out = Vec::new();
    for (i, cell) in frame.cells.iter().enumerate() {
        let j = best_box(cell);
        let conf = cell.boxes[j].confidence.max(0.0);
        if conf <= 0.0 {
            continue;
        }
        let g = cell.boxes[j].geometry;
        let local = BoxGeometry::new(
            g.cx.clamp(0.0, 1.0),
            g.cy.clamp(0.0, 1.0),
            g.w.max(0.0),
            g.h.max(0.0),
        );
        let bbox = GridCell::from_index(i, cfg.s).to_image(&local, cfg.s);
        for (class_id, &p) in cell.class_probs.iter().enumerate() {
            let score = p.max(0.0) * conf;
            if score > cfg.detect_threshold {
                out.push(Detection {
                    class_id,
                    bbox,
                    score,
                });
            }
        }
    }
    out
}

/// Thresholded per-cell detections followed by per-class NMS.
pub fn decode_detections(frame: &FrameTensor, cfg: &ModelConfig) -> Vec<Detection> {
    nms(&candidate_detections(frame, cfg), cfg.nms_iou)
}

/// [`decode_detections`] on a flat frame.
pub fn decode_flat(v: &[f64], cfg: &ModelConfig) -> Result<Vec<Detection>> {
    Ok(decode_detections(&unflatten(v, cfg)?, cfg))
}
