//! Seeded synthetic clips: boxes drifting at constant velocity with jitter,
//! and pseudo-labels made by corrupting the ideal tensor of each frame.
//!
//! The corruption mimics the usual failure modes of a frame-level detector:
//! the class flickers to a wrong category, confidence collapses below the
//! detection threshold, confidences are noisy and boxes wobble.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::dataset::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::geometry::BoxGeometry;
use crate::grid::{encode_ground_truth, GroundTruthFrame, LabeledObject, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Velocity components are drawn uniformly from `[-max_speed, max_speed]`
    /// (image units per frame).
    pub max_speed: f64,
    /// Per-frame Gaussian position jitter.
    pub jitter_std: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Sampling weight per class; zero-weight classes never appear.
    pub class_weights: Vec<f64>,
    /// Objects within one clip get different classes while enough remain.
    pub distinct_classes: bool,
}

impl SceneConfig {
    /// Uniform over `active` classes out of `c`.
    pub fn with_active_classes(c: usize, active: &[usize]) -> Self {
        let mut class_weights = vec![0.0; c];
        for &k in active {
            if k < c {
                class_weights[k] = 1.0;
            }
        }
        Self {
            min_objects: 1,
            max_objects: 3,
            max_speed: 0.02,
            jitter_std: 0.003,
            min_size: 0.2,
            max_size: 0.45,
            class_weights,
            distinct_classes: true,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("scene: {m}")));
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(self.max_speed >= 0.0 && self.jitter_std >= 0.0) {
            return bad("speed and jitter must be non-negative");
        }
        if !(0.0 <= self.min_size && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return bad("sizes must satisfy 0 <= min_size <= max_size <= 1");
        }
        if self.class_weights.len() != cfg.c {
            return bad("class_weights must have C entries");
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return bad("class_weights must be non-negative with a positive sum");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionConfig {
    /// Chance that an object cell reports a different class.
    pub class_flip_prob: f64,
    /// Chance that an object's confidence collapses.
    pub miss_prob: f64,
    /// Factor applied to the confidence of a missed object.
    pub miss_residual: f64,
    /// Additive noise on every box confidence.
    pub conf_noise_std: f64,
    /// Additive noise on box center and size (image units).
    pub loc_jitter_std: f64,
    /// Classes a flip may land on; `None` means any other class.
    pub flip_targets: Option<Vec<usize>>,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            class_flip_prob: 0.0,
            miss_prob: 0.0,
            miss_residual: 0.05,
            conf_noise_std: 0.0,
            loc_jitter_std: 0.0,
            flip_targets: None,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.class_flip_prob, self.miss_prob, self.miss_residual];
        let stds = [self.conf_noise_std, self.loc_jitter_std];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig(format!("corruption: {self:?}")));
        }
        Ok(())
    }
}

/// SplitMix64 step, used to derive independent child seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("std validated non-negative")
}

struct Mover {
    class_id: usize,
    pos: [f64; 2],
    vel: [f64; 2],
    size: [f64; 2],
}

impl Mover {
    fn advance(&mut self, rng: &mut ChaCha8Rng, jitter: &Normal<f64>) {
        for k in 0..2 {
            let lo = self.size[k] / 2.0;
            let hi = 1.0 - lo;
            let mut p = self.pos[k] + self.vel[k] + jitter.sample(rng);
            if p < lo {
                p = 2.0 * lo - p;
                self.vel[k] = -self.vel[k];
            } else if p > hi {
                p = 2.0 * hi - p;
                self.vel[k] = -self.vel[k];
            }
            self.pos[k] = p.clamp(lo, hi);
        }
    }

    fn object(&self) -> LabeledObject {
        LabeledObject {
            class_id: self.class_id,
            bbox: BoxGeometry::new(self.pos[0], self.pos[1], self.size[0], self.size[1]),
        }
    }
}

/// Ground truth for `cfg.t` frames of one clip.
pub fn gen_sequence(scene: &SceneConfig, cfg: &ModelConfig, seed: u64) -> Result<Vec<GroundTruthFrame>> {
    scene.validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(scene.min_objects..=scene.max_objects);
    let mut weights = scene.class_weights.clone();
    let mut movers = Vec::with_capacity(n);
    for _ in 0..n {
        if weights.iter().all(|&w| w == 0.0) {
            weights = scene.class_weights.clone();
        }
        let class_id = WeightedIndex::new(&weights)
            .expect("weights validated")
            .sample(&mut rng);
        if scene.distinct_classes {
            weights[class_id] = 0.0;
        }
        let size = [
            rng.gen_range(scene.min_size..=scene.max_size),
            rng.gen_range(scene.min_size..=scene.max_size),
        ];
        let pos = [
            rng.gen_range(size[0] / 2.0..=1.0 - size[0] / 2.0),
            rng.gen_range(size[1] / 2.0..=1.0 - size[1] / 2.0),
        ];
        let vel = [
            rng.gen_range(-scene.max_speed..=scene.max_speed),
            rng.gen_range(-scene.max_speed..=scene.max_speed),
        ];
        movers.push(Mover {
            class_id,
            pos,
            vel,
            size,
        });
    }

    let jitter = normal(scene.jitter_std);
    let mut frames = Vec::with_capacity(cfg.t);
    for t in 0..cfg.t {
        if t > 0 {
            for m in &mut movers {
                m.advance(&mut rng, &jitter);
            }
        }
        let objects: Vec<LabeledObject> = movers.iter().map(Mover::object).collect();
        frames.push(encode_ground_truth(&objects, cfg)?);
    }
    Ok(frames)
}

/// Flat pseudo-label for one frame: the ideal tensor with seeded damage.
pub fn corrupt(gt: &GroundTruthFrame, corruption: &CorruptionConfig, cfg: &ModelConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = gt.ideal_flat(cfg);
    let conf_noise = normal(corruption.conf_noise_std);
    let loc = normal(corruption.loc_jitter_std);
    let sf = cfg.s as f64;

    for (i, target) in gt.grid.iter().enumerate() {
        if let Some(t) = target {
            if rng.gen::<f64>() < corruption.class_flip_prob {
                let pool: Vec<usize> = match &corruption.flip_targets {
                    Some(list) => list.iter().copied().filter(|&k| k != t.class_id && k < cfg.c).collect(),
                    None => (0..cfg.c).filter(|&k| k != t.class_id).collect(),
                };
                if !pool.is_empty() {
                    let to = pool[rng.gen_range(0..pool.len())];
                    let co = cfg.class_offset(i);
                    v[co + t.class_id] = 0.0;
                    v[co + to] = 1.0;
                }
            }
            if rng.gen::<f64>() < corruption.miss_prob {
                v[cfg.conf_index(i, 0)] *= corruption.miss_residual;
            }
            let o = cfg.box_offset(i, 0);
            v[o] = (v[o] + sf * loc.sample(&mut rng)).clamp(0.0, 1.0);
            v[o + 1] = (v[o + 1] + sf * loc.sample(&mut rng)).clamp(0.0, 1.0);
            v[o + 2] = (v[o + 2] + loc.sample(&mut rng)).max(0.0);
            v[o + 3] = (v[o + 3] + loc.sample(&mut rng)).max(0.0);
        }
        for j in 0..cfg.b {
            let ci = cfg.conf_index(i, j);
            v[ci] = (v[ci] + conf_noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    v
}

/// One clip with pseudo-labels and ground truth on every frame.
pub fn make_sequence(
    id: String,
    scene: &SceneConfig,
    corruption: &CorruptionConfig,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Sequence> {
    corruption.validate()?;
    let truth = gen_sequence(scene, cfg, mix_seed(seed, 1))?;
    let corrupt_seed = mix_seed(seed, 2);
    let frames = truth
        .iter()
        .enumerate()
        .map(|(t, gt)| corrupt(gt, corruption, cfg, mix_seed(corrupt_seed, t as u64)))
        .collect();
    let annotations: BTreeMap<usize, Vec<LabeledObject>> =
        truth.into_iter().enumerate().map(|(t, gt)| (t, gt.objects)).collect();
    Ok(Sequence {
        id,
        frames,
        annotations,
    })
}

/// `n` clips named `{prefix}-{index:05}`.
pub fn gen_dataset(
    n: usize,
    prefix: &str,
    scene: &SceneConfig,
    corruption: &CorruptionConfig,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    let sequences = (0..n)
        .map(|i| {
            make_sequence(
                format!("{prefix}-{i:05}"),
                scene,
                corruption,
                cfg,
                mix_seed(seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(cfg, sequences))
}
