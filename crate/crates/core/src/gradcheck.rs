//! Central finite-difference checks of every analytic gradient.
//!
//! Each component is exercised on several seeded tiny instances. Points are
//! drawn away from the non-differentiable spots of the objective (zero
//! sizes, clamped or tied confidences).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::BoxGeometry;
use crate::grid::{encode_ground_truth, GroundTruthFrame, LabeledObject, ModelConfig};
use crate::losses::{category_loss, consistency_loss, detection_loss, similarity_loss, total_loss};
use crate::rnn::{backward, forward, init_params, Candidate, GruNetwork, Mode, NetworkDims};
use crate::synthdata::mix_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub instances: usize,
    pub seed: u64,
    /// Step is `rel_step * max(1, |θ|)`.
    pub rel_step: f64,
    /// Five-point step for checks through the network. Network objectives
    /// are large next to the gradients of deep weights, so small steps
    /// drown in roundoff.
    pub network_step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub min_hidden: usize,
    pub max_hidden: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::with_grid(2, 1, 3, 3),
            instances: 5,
            seed: 0,
            rel_step: 1e-5,
            network_step: 1e-3,
            floor: 1e-6,
            min_hidden: 4,
            max_hidden: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// Coordinates compared across all instances.
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error between `analytic` and central differences of `f` at `x`.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    rel_step: f64,
    floor: f64,
) -> f64 {
    worst_error(x, analytic, floor, |probe, k| {
        let x0 = probe[k];
        let h = rel_step * x0.abs().max(1.0);
        probe[k] = x0 + h;
        let up = f(probe);
        probe[k] = x0 - h;
        let down = f(probe);
        probe[k] = x0;
        (up - down) / (2.0 * h)
    })
}

/// As [`check_gradient`] with the fourth-order five-point stencil, which
/// tolerates the wider steps needed when `f` is large.
pub fn check_gradient_five_point(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    rel_step: f64,
    floor: f64,
) -> f64 {
    worst_error(x, analytic, floor, |probe, k| {
        let x0 = probe[k];
        let h = rel_step * x0.abs().max(1.0);
        let mut at = |d: f64| {
            probe[k] = x0 + d;
            f(probe)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
        probe[k] = x0;
        (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
    })
}

fn worst_error(x: &[f64], analytic: &[f64], floor: f64, mut numeric: impl FnMut(&mut [f64], usize) -> f64) -> f64 {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| rel_error(analytic[k], numeric(&mut probe, k), floor))
        .fold(0.0, f64::max)
}

/// A prediction-shaped frame with sizes and confidences kept off their kinks.
pub fn random_frame(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut v = vec![0.0; cfg.frame_len()];
    for i in 0..cfg.cells() {
        for j in 0..cfg.b {
            let o = cfg.box_offset(i, j);
            v[o] = rng.gen_range(0.0..1.0);
            v[o + 1] = rng.gen_range(0.0..1.0);
            v[o + 2] = rng.gen_range(0.1..1.0);
            v[o + 3] = rng.gen_range(0.1..1.0);
            // disjoint bands keep box confidences apart
            v[o + 4] = (j as f64 + rng.gen_range(0.1..0.9)) / cfg.b as f64;
        }
        let co = cfg.class_offset(i);
        for c in 0..cfg.c {
            v[co + c] = rng.gen_range(-0.2..1.0);
        }
    }
    v
}

pub fn random_truth(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<GroundTruthFrame> {
    let n = rng.gen_range(1..=cfg.cells().min(3));
    let objects: Vec<LabeledObject> = (0..n)
        .map(|_| {
            let w = rng.gen_range(0.1..0.6);
            let h = rng.gen_range(0.1..0.6);
            LabeledObject {
                class_id: rng.gen_range(0..cfg.c),
                bbox: BoxGeometry::new(
                    rng.gen_range(w / 2.0..1.0 - w / 2.0),
                    rng.gen_range(h / 2.0..1.0 - h / 2.0),
                    w,
                    h,
                ),
            }
        })
        .collect();
    encode_ground_truth(&objects, cfg)
}

fn split(x: &[f64], t: usize) -> Vec<Vec<f64>> {
    x.chunks(x.len() / t).map(<[f64]>::to_vec).collect()
}

fn flat_params(net: &GruNetwork) -> Vec<f64> {
    net.tensors().into_iter().flat_map(|(_, t, _)| t.to_vec()).collect()
}

fn set_params(net: &mut GruNetwork, x: &[f64]) {
    let mut at = 0;
    for t in net.tensors_mut() {
        t.copy_from_slice(&x[at..at + t.len()]);
        at += t.len();
    }
}

struct Instance {
    preds: Vec<Vec<f64>>,
    pseudo: Vec<Vec<f64>>,
    gt: GroundTruthFrame,
}

fn instance(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Instance> {
    Ok(Instance {
        preds: (0..cfg.t).map(|_| random_frame(cfg, rng)).collect(),
        pseudo: (0..cfg.t).map(|_| random_frame(cfg, rng)).collect(),
        gt: random_truth(cfg, rng)?,
    })
}

fn random_net(gc: &GradcheckConfig, k: usize, rng: &mut ChaCha8Rng) -> GruNetwork {
    let dims = NetworkDims {
        input: gc.model.frame_len(),
        hidden: vec![
            rng.gen_range(gc.min_hidden..=gc.max_hidden),
            rng.gen_range(gc.min_hidden..=gc.max_hidden),
        ],
    };
    let mut net = init_params(&dims, rng.gen());
    net.candidate = if k % 2 == 0 { Candidate::Sigmoid } else { Candidate::Tanh };
    net.dropout = if k % 3 == 2 { 0.0 } else { 0.3 };
    net
}

/// Runs every component and reports the worst relative error of each.
pub fn run_suite(gc: &GradcheckConfig) -> Result<Vec<ComponentReport>> {
    let cfg = &gc.model;
    cfg.validate()?;
    let t = cfg.t;
    let names = [
        "detection",
        "similarity",
        "category",
        "consistency",
        "total",
        "bptt",
        "end_to_end",
    ];
    let mut reports: Vec<ComponentReport> = names
        .iter()
        .map(|&name| ComponentReport {
            name,
            max_rel_error: 0.0,
            checked: 0,
        })
        .collect();
    let mut record = |idx: usize, err: f64, n: usize| {
        reports[idx].max_rel_error = reports[idx].max_rel_error.max(err);
        reports[idx].checked += n;
    };
    let (h, floor) = (gc.rel_step, gc.floor);

    for k in 0..gc.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(gc.seed, k as u64));
        let inst = instance(cfg, &mut rng)?;
        let x: Vec<f64> = inst.preds.concat();
        let last = inst.preds.last().expect("t >= 1");

        let (_, g) = detection_loss(last, &inst.gt, cfg)?;
        let e = check_gradient(|p| detection_loss(p, &inst.gt, cfg).map_or(f64::NAN, |r| r.0), last, &g, h, floor);
        record(0, e, g.len());

        let (_, g) = similarity_loss(&inst.preds, &inst.pseudo, cfg)?;
        let f = |p: &[f64]| similarity_loss(&split(p, t), &inst.pseudo, cfg).map_or(f64::NAN, |r| r.0);
        record(1, check_gradient(f, &x, &g.concat(), h, floor), x.len());

        let (_, g) = category_loss(&inst.preds, &inst.gt, cfg)?;
        let f = |p: &[f64]| category_loss(&split(p, t), &inst.gt, cfg).map_or(f64::NAN, |r| r.0);
        record(2, check_gradient(f, &x, &g.concat(), h, floor), x.len());

        let (_, g) = consistency_loss(&inst.preds, cfg)?;
        let f = |p: &[f64]| consistency_loss(&split(p, t), cfg).map_or(f64::NAN, |r| r.0);
        record(3, check_gradient(f, &x, &g.concat(), h, floor), x.len());

        let (_, g) = total_loss(&inst.preds, &inst.pseudo, &inst.gt, cfg)?;
        let f = |p: &[f64]| total_loss(&split(p, t), &inst.pseudo, &inst.gt, cfg).map_or(f64::NAN, |r| r.0.total);
        record(4, check_gradient(f, &x, &g.concat(), h, floor), x.len());

        // BPTT against a random linear functional of the outputs, dropout mask fixed by seed
        let net = random_net(gc, k, &mut rng);
        let weights: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..cfg.frame_len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mask_seed: u64 = rng.gen();
        let inputs = &inst.pseudo;
        let (_, cache) = forward(&net, inputs, Mode::Train, mask_seed)?;
        let theta = flat_params(&net);
        let analytic = flat_params(&backward(&net, &cache, &weights)?);
        let mut probe = net.clone();
        let f = |p: &[f64]| {
            set_params(&mut probe, p);
            let (y, _) = forward(&probe, inputs, Mode::Train, mask_seed).expect("shapes fixed");
            y.iter()
                .zip(&weights)
                .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>())
                .sum()
        };
        record(5, check_gradient(f, &theta, &analytic, h, floor), theta.len());

        // full objective through the network; the head is biased so sizes
        // and confidences stay clear of zero
        let mut net = net;
        net.out_w.iter_mut().for_each(|w| *w *= 0.1);
        for i in 0..cfg.cells() {
            for j in 0..cfg.b {
                let o = cfg.box_offset(i, j);
                net.out_b[o + 2] = 1.0;
                net.out_b[o + 3] = 1.0;
                net.out_b[o + 4] = 1.0 + j as f64;
            }
        }
        let (y, cache) = forward(&net, inputs, Mode::Train, mask_seed)?;
        let (_, g_out) = total_loss(&y, inputs, &inst.gt, cfg)?;
        let theta = flat_params(&net);
        let analytic = flat_params(&backward(&net, &cache, &g_out)?);
        let mut probe = net.clone();
        let f = |p: &[f64]| {
            set_params(&mut probe, p);
            let (y, _) = forward(&probe, inputs, Mode::Train, mask_seed).expect("shapes fixed");
            total_loss(&y, inputs, &inst.gt, cfg).map_or(f64::NAN, |r| r.0.total)
        };
        record(6, check_gradient_five_point(f, &theta, &analytic, gc.network_step, floor), theta.len());
    }
    Ok(reports)
}
