//! Optional TOML settings file. Every field may be omitted; command-line
//! flags override it and built-in defaults fill the rest.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub scene: SceneSection,
    #[serde(default)]
    pub corruption: CorruptionSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda_coord: Option<f64>,
    pub lambda_noobj: Option<f64>,
    pub detect_threshold: Option<f64>,
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Option<Vec<usize>>,
    pub dropout: Option<f64>,
    pub candidate: Option<String>,
    pub init_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub shuffle_seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub workers: Option<usize>,
    pub lr: Option<f64>,
    pub rho: Option<f64>,
    pub momentum: Option<f64>,
    pub eps: Option<f64>,
    pub clip: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub sequences: Option<usize>,
    pub seed: Option<u64>,
    pub prefix: Option<String>,
    pub s: Option<usize>,
    pub b: Option<usize>,
    pub c: Option<usize>,
    pub t: Option<usize>,
    pub active: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub min_objects: Option<usize>,
    pub max_objects: Option<usize>,
    pub max_speed: Option<f64>,
    pub jitter_std: Option<f64>,
    pub min_size: Option<f64>,
    pub max_size: Option<f64>,
    pub distinct_classes: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSection {
    pub class_flip_prob: Option<f64>,
    pub miss_prob: Option<f64>,
    pub miss_residual: Option<f64>,
    pub conf_noise_std: Option<f64>,
    pub loc_jitter_std: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
