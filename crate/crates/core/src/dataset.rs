use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{encode_ground_truth, GroundTruthFrame, LabeledObject, ModelConfig};

/// Pseudo-label frames of one clip plus whatever ground truth exists for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    /// Flat pseudo-label tensors, one per step.
    pub frames: Vec<Vec<f64>>,
    /// Labeled objects keyed by frame index.
    pub annotations: BTreeMap<usize, Vec<LabeledObject>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Objects labeled on the last frame, if that frame is annotated.
    pub fn final_objects(&self) -> Option<&[LabeledObject]> {
        let last = self.frames.len().checked_sub(1)?;
        self.annotations.get(&last).map(Vec::as_slice)
    }

    /// Grid target of the last frame.
    pub fn final_truth(&self, cfg: &ModelConfig) -> Result<GroundTruthFrame> {
        let objs = self
            .final_objects()
            .ok_or_else(|| Error::MissingTruth(self.id.clone()))?;
        encode_ground_truth(objs, cfg)
    }

    /// Keeps only the final frame's annotation.
    pub fn final_only(mut self) -> Self {
        let last = self.frames.len().saturating_sub(1);
        self.annotations.retain(|&k, _| k == last);
        self
    }
}

/// A set of sequences sharing one grid shape and length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub s: usize,
    pub b: usize,
    pub c: usize,
    pub t: usize,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn new(cfg: &ModelConfig, sequences: Vec<Sequence>) -> Self {
        Self {
            s: cfg.s,
            b: cfg.b,
            c: cfg.c,
            t: cfg.t,
            sequences,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.s * self.s * (5 * self.b + self.c)
    }

    /// Fails unless `cfg` uses the same grid shape as this dataset.
    pub fn check_grid(&self, cfg: &ModelConfig) -> Result<()> {
        if (self.s, self.b, self.c) != (cfg.s, cfg.b, cfg.c) {
            return Err(Error::ConfigMismatch(format!(
                "dataset grid S={} B={} C={} but model uses S={} B={} C={}",
                self.s, self.b, self.c, cfg.s, cfg.b, cfg.c
            )));
        }
        Ok(())
    }

    /// Checks every sequence against the declared shape.
    pub fn validate(&self) -> Result<()> {
        let n = self.frame_len();
        for seq in &self.sequences {
            if seq.len() != self.t {
                return Err(Error::InconsistentSequence {
                    seq_id: seq.id.clone(),
                    expected: self.t,
                    got: seq.len(),
                });
            }
            for (i, f) in seq.frames.iter().enumerate() {
                if f.len() != n {
                    return Err(Error::FrameLength {
                        seq_id: seq.id.clone(),
                        frame: i,
                        expected: n,
                        got: f.len(),
                    });
                }
            }
            if let Some(&k) = seq.annotations.keys().find(|&&k| k >= seq.len()) {
                return Err(Error::Format(format!(
                    "sequence {} annotates frame {k} beyond its length {}",
                    seq.id,
                    seq.len()
                )));
            }
        }
        Ok(())
    }
}
