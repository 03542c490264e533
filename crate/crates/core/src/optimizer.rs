//! RMSProp with momentum on the preconditioned step:
//!
//! ```text
//! cache ← ρ·cache + (1 − ρ)·g²
//! v     ← μ·v + lr·g / √(cache + ε)
//! θ     ← θ − v
//! ```

use crate::error::{Error, Result};
use crate::rnn::GruNetwork;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub rho: f64,
    pub momentum: f64,
    pub eps: f64,
    /// Element-wise gradient clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            rho: 0.9,
            momentum: 0.9,
            eps: 1e-8,
            clip: None,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..=1.0).contains(&self.rho)
            && (0.0..=1.0).contains(&self.momentum)
            && self.eps > 0.0
            && self.clip.map_or(true, |c| c > 0.0);
        if !ok {
            return Err(Error::InvalidConfig(format!("bad optimizer settings: {self:?}")));
        }
        Ok(())
    }
}

/// Running statistics, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: RmsPropConfig,
    pub cache: Vec<Vec<f64>>,
    pub velocity: Vec<Vec<f64>>,
    pub steps: u64,
}

impl OptState {
    /// Zeroed buffers shaped like `sizes`.
    pub fn new(config: RmsPropConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            cache: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            velocity: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
        }
    }

    pub fn for_network(config: RmsPropConfig, net: &GruNetwork) -> Self {
        let sizes: Vec<usize> = net.tensors().iter().map(|(_, t, _)| t.len()).collect();
        Self::new(config, &sizes)
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.cache.len() || grads.len() != self.cache.len() {
            return Err(Error::dim("optimizer tensor count", self.cache.len(), params.len().min(grads.len())));
        }
        for (k, ((p, g), (cache, vel))) in params
            .iter()
            .zip(grads)
            .zip(self.cache.iter().zip(&self.velocity))
            .enumerate()
        {
            if p.len() != cache.len() || g.len() != cache.len() || vel.len() != cache.len() {
                return Err(Error::dim(format!("optimizer tensor {k}"), cache.len(), p.len()));
            }
        }
        let RmsPropConfig {
            lr,
            rho,
            momentum,
            eps,
            clip,
        } = self.config;
        for ((p, g), (cache, vel)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.cache.iter_mut().zip(self.velocity.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = match clip {
                    Some(c) => g[i].clamp(-c, c),
                    None => g[i],
                };
                cache[i] = rho * cache[i] + (1.0 - rho) * gi * gi;
                vel[i] = momentum * vel[i] + lr * gi / (cache[i] + eps).sqrt();
                p[i] -= vel[i];
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut GruNetwork, grads: &GruNetwork) -> Result<()> {
        let g: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, t, _)| t).collect();
        let mut p = net.tensors_mut();
        self.step(&mut p, &g)
    }
}
