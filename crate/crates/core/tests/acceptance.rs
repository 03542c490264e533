//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidrefine::evaluator::{average_precision, MatchResult, ScoredHit};
use vidrefine::geometry::nms;
use vidrefine::gradcheck::{random_frame, random_truth, run_suite, GradcheckConfig};
use vidrefine::grid::{encode_ground_truth, flatten, unflatten, ModelConfig};
use vidrefine::io::{checkpoint_from_bytes, checkpoint_to_bytes, dataset_from_bytes, dataset_to_bytes, Checkpoint};
use vidrefine::losses::total_loss;
use vidrefine::optimizer::RmsPropConfig;
use vidrefine::rnn::{forward, init_params, Candidate, GruNetwork, Mode, NetworkDims};
use vidrefine::synthdata::{gen_dataset, mix_seed, CorruptionConfig, SceneConfig};
use vidrefine::trainer::{
    batch_gradient, dataset_loss, evaluate_pseudo_labels, evaluate_split, prepare_truth, train, BatchItem,
    TrainConfig, TrainOutcome,
};
use vidrefine::{Dataset, Sequence};

const GRAD_TOL: f64 = 1e-4;
const BENCH_BUDGET_SECS: f64 = 600.0;
const TIE_POINTS: f64 = 0.5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- criterion 1

fn gradients() -> Verdict {
    let gc = GradcheckConfig::default();
    let reports = match run_suite(&gc) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("suite error: {e}")),
    };
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let pass = reports.iter().all(|r| r.max_rel_error <= GRAD_TOL && r.checked > 0) && gc.instances >= 5;
    let parts: Vec<String> = reports
        .iter()
        .map(|r| format!("{}={:.2e}", r.name, r.max_rel_error))
        .collect();
    verdict(
        pass,
        format!("{} instances, worst {worst:.2e} [{}]", gc.instances, parts.join(" ")),
    )
}

// ------------------------------------------------------------ criteria 2 and 3

/// Benchmark setting: 10 active classes on a 7x7 grid with two boxes and 20
/// classes, eight-frame clips.
fn bench_model() -> ModelConfig {
    ModelConfig::with_grid(7, 2, 20, 8)
}

fn bench_active() -> Vec<usize> {
    (0..10).collect()
}

fn bench_scene() -> SceneConfig {
    let mut scene = SceneConfig::with_active_classes(20, &bench_active());
    scene.min_objects = 1;
    scene.max_objects = 1;
    scene.min_size = 0.5;
    scene.max_size = 0.8;
    scene.max_speed = 0.005;
    scene
}

fn bench_corruption() -> CorruptionConfig {
    CorruptionConfig {
        class_flip_prob: 0.2,
        miss_prob: 0.2,
        conf_noise_std: 0.1,
        loc_jitter_std: 0.02,
        flip_targets: Some(bench_active()),
        ..Default::default()
    }
}

fn bench_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 16,
        shuffle_seed: seed,
        eval_every: 0,
        workers: 1,
        optimizer: RmsPropConfig {
            lr: 3e-4,
            clip: Some(5.0),
            ..Default::default()
        },
    }
}

#[derive(Clone, Copy, Debug)]
enum Weighting {
    NoCategoryNoConsistency,
    NoConsistency,
    Full,
}

impl Weighting {
    fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Weighting::NoCategoryNoConsistency => {
                cfg.beta = 0.0;
                cfg.gamma = 0.0;
            }
            Weighting::NoConsistency => cfg.gamma = 0.0,
            Weighting::Full => {}
        }
    }
}

struct BenchRun {
    raw: f64,
    refined: f64,
    secs: f64,
}

fn bench_run(seed: u64, weighting: Weighting) -> vidrefine::Result<BenchRun> {
    let start = Instant::now();
    let mut cfg = bench_model();
    weighting.apply(&mut cfg);
    let train_set = gen_dataset(200, "train", &bench_scene(), &bench_corruption(), &cfg, 1000 + seed)?;
    let test_set = gen_dataset(50, "test", &bench_scene(), &bench_corruption(), &cfg, 2000 + seed)?;
    let mut net = init_params(
        &NetworkDims {
            input: cfg.frame_len(),
            hidden: vec![32, 32],
        },
        seed,
    );
    net.dropout = 0.0;
    net.candidate = Candidate::Tanh;
    let out = train(&train_set.sequences, net, &cfg, &bench_train(seed))?;
    Ok(BenchRun {
        raw: evaluate_pseudo_labels(&test_set.sequences, &cfg)?.map,
        refined: evaluate_split(&test_set.sequences, &out.net, &cfg)?.map,
        secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Default)]
struct BenchCache {
    runs: BTreeMap<(u64, u8), BenchRun>,
}

impl BenchCache {
    fn get(&mut self, seed: u64, w: Weighting) -> vidrefine::Result<&BenchRun> {
        let key = (seed, w as u8);
        if !self.runs.contains_key(&key) {
            let run = bench_run(seed, w)?;
            eprintln!(
                "  bench seed={seed} weighting={w:?} raw={:.4} refined={:.4} secs={:.1}",
                run.raw, run.refined, run.secs
            );
            self.runs.insert(key, run);
        }
        Ok(&self.runs[&key])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn benchmark(cache: &mut BenchCache) -> Verdict {
    let (mut raw, mut refined, mut secs) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3 {
        match cache.get(seed, Weighting::Full) {
            Ok(r) => {
                raw.push(r.raw);
                refined.push(r.refined);
                secs.push(r.secs);
            }
            Err(e) => return verdict(false, format!("run error: {e}")),
        }
    }
    let gain = 100.0 * (mean(&refined) - mean(&raw));
    let slowest = secs.iter().copied().fold(0.0, f64::max);
    verdict(
        gain >= 5.0 && slowest <= BENCH_BUDGET_SECS,
        format!(
            "raw mAP {:.2}, refined {:.2}, gain {gain:+.2} points, slowest run {slowest:.1}s",
            100.0 * mean(&raw),
            100.0 * mean(&refined)
        ),
    )
}

fn ablation(cache: &mut BenchCache) -> Verdict {
    let mut means = Vec::new();
    for w in [Weighting::NoCategoryNoConsistency, Weighting::NoConsistency, Weighting::Full] {
        let mut maps = Vec::new();
        for seed in 0..5 {
            match cache.get(seed, w) {
                Ok(r) => maps.push(r.refined),
                Err(e) => return verdict(false, format!("run error: {e}")),
            }
        }
        means.push(100.0 * mean(&maps));
    }
    let pass = means[0] <= means[1] + TIE_POINTS && means[1] <= means[2] + TIE_POINTS;
    verdict(
        pass,
        format!(
            "mean mAP without category+consistency {:.2} <= without consistency {:.2} <= full {:.2} (tie {TIE_POINTS})",
            means[0], means[1], means[2]
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn evaluation() -> Verdict {
    let hit = |score, true_positive| ScoredHit {
        class_id: 0,
        score,
        true_positive,
    };
    let pooled = MatchResult {
        detections: vec![hit(0.9, true), hit(0.8, false), hit(0.7, true)],
        gt_counts: vec![2],
    };
    let ap = average_precision(&pooled, 0);
    let ap_ok = (ap - 28.0 / 33.0).abs() <= 1e-12;

    let perfect = perfect_map();
    let perfect_ok = perfect.as_ref().is_ok_and(|m| m.iter().all(|&v| v == 1.0));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut agree = 0;
    for i in 0..100 {
        let dets = common::random_detections(&mut rng);
        let thr = [0.3, 0.5, 0.7][i % 3];
        if nms(&dets, thr) == common::brute_force_nms(&dets, thr) {
            agree += 1;
        }
    }
    verdict(
        ap_ok && perfect_ok && agree == 100,
        format!("AP {ap:.15} (28/33), perfect mAP {perfect:?}, NMS oracle agreement {agree}/100"),
    )
}

/// mAP of a detector that outputs the ideal encoding, scored both as raw
/// pseudo-labels and through an identity head.
fn perfect_map() -> vidrefine::Result<Vec<f64>> {
    let cfg = bench_model();
    let scene = SceneConfig {
        max_objects: 3,
        ..bench_scene()
    };
    let mut ds = gen_dataset(20, "ideal", &scene, &CorruptionConfig::default(), &cfg, 77)?;
    for seq in &mut ds.sequences {
        for (t, frame) in seq.frames.iter_mut().enumerate() {
            *frame = encode_ground_truth(&seq.annotations[&t], &cfg)?.ideal_flat(&cfg);
        }
    }
    let n = cfg.frame_len();
    let mut identity = GruNetwork::zeros(&NetworkDims {
        input: n,
        hidden: vec![],
    });
    for i in 0..n {
        identity.out_w[i * n + i] = 1.0;
    }
    Ok(vec![
        evaluate_pseudo_labels(&ds.sequences, &cfg)?.map,
        evaluate_split(&ds.sequences, &identity, &cfg)?.map,
    ])
}

// ---------------------------------------------------------------- criterion 5

fn invariants() -> Verdict {
    let checks: [(&str, fn() -> vidrefine::Result<bool>); 6] = [
        ("hidden-range", hidden_in_unit_interval),
        ("loss-sign", losses_non_negative),
        ("flatten", flatten_round_trip),
        ("dataset-io", dataset_round_trip),
        ("checkpoint-io", checkpoint_round_trip),
        ("reproducible", training_reproducible),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        match check() {
            Ok(true) => {}
            Ok(false) => failed.push(name.to_string()),
            Err(e) => failed.push(format!("{name} ({e})")),
        }
    }
    let names: Vec<&str> = checks.iter().map(|c| c.0).collect();
    if failed.is_empty() {
        verdict(true, format!("all hold: {}", names.join(", ")))
    } else {
        verdict(false, format!("violated: {}", failed.join(", ")))
    }
}

fn hidden_in_unit_interval() -> vidrefine::Result<bool> {
    let cfg = ModelConfig::with_grid(2, 2, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for k in 0..50u64 {
        let net = init_params(
            &NetworkDims {
                input: cfg.frame_len(),
                hidden: vec![rng.gen_range(2..10), rng.gen_range(2..10)],
            },
            k,
        );
        let frames: Vec<Vec<f64>> = (0..cfg.t)
            .map(|_| (0..cfg.frame_len()).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let (_, cache) = forward(&net, &frames, Mode::Eval, k)?;
        for layers in cache.hidden_states() {
            if !layers.iter().all(|h| h.iter().all(|&v| (0.0..1.0).contains(&v))) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn losses_non_negative() -> vidrefine::Result<bool> {
    let cfg = ModelConfig::with_grid(3, 2, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..100 {
        let preds: Vec<Vec<f64>> = (0..cfg.t)
            .map(|_| (0..cfg.frame_len()).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let pseudo: Vec<Vec<f64>> = (0..cfg.t).map(|_| random_frame(&cfg, &mut rng)).collect();
        let gt = random_truth(&cfg, &mut rng)?;
        let (l, _) = total_loss(&preds, &pseudo, &gt, &cfg)?;
        if [l.detection, l.similarity, l.category, l.consistency, l.total]
            .iter()
            .any(|&v| !(v >= 0.0))
        {
            return Ok(false);
        }
    }
    Ok(true)
}

fn flatten_round_trip() -> vidrefine::Result<bool> {
    let cfg = ModelConfig::with_grid(3, 2, 5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for _ in 0..100 {
        let v: Vec<f64> = (0..cfg.frame_len()).map(|_| f64::from_bits(rng.gen())).collect();
        let back = flatten(&unflatten(&v, &cfg)?, &cfg)?;
        if !v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn frames_bit_equal(a: &[Sequence], b: &[Sequence]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.id == y.id
                && x.annotations == y.annotations
                && x.frames.len() == y.frames.len()
                && x.frames.iter().zip(&y.frames).all(|(f, g)| {
                    f.len() == g.len() && f.iter().zip(g).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        })
}

fn noisy_dataset(n: usize, seed: u64) -> vidrefine::Result<Dataset> {
    let cfg = bench_model();
    let scene = SceneConfig {
        max_objects: 3,
        ..bench_scene()
    };
    gen_dataset(n, "inv", &scene, &bench_corruption(), &cfg, seed)
}

fn dataset_round_trip() -> vidrefine::Result<bool> {
    for seed in 0..5 {
        let ds = noisy_dataset(4, mix_seed(54, seed))?;
        let bytes = dataset_to_bytes(&ds)?;
        let back = dataset_from_bytes(&bytes)?;
        if !frames_bit_equal(&ds.sequences, &back.sequences) || dataset_to_bytes(&back)? != bytes {
            return Ok(false);
        }
    }
    Ok(true)
}

fn nets_bit_equal(a: &GruNetwork, b: &GruNetwork) -> bool {
    let (ta, tb) = (a.tensors(), b.tensors());
    ta.len() == tb.len()
        && ta.iter().zip(&tb).all(|(x, y)| {
            x.0 == y.0 && x.1.len() == y.1.len() && x.1.iter().zip(y.1).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn checkpoint_round_trip() -> vidrefine::Result<bool> {
    let cfg = bench_model();
    let ds = noisy_dataset(4, 55)?;
    let mut net = init_params(
        &NetworkDims {
            input: cfg.frame_len(),
            hidden: vec![8, 6],
        },
        55,
    );
    net.candidate = Candidate::Tanh;
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..Default::default()
    };
    let out = train(&ds.sequences, net, &cfg, &tc)?;
    let ck = Checkpoint {
        model: cfg.clone(),
        net: out.net,
        optimizer: Some(out.optimizer),
        init_seed: 55,
        shuffle_seed: 0,
        epochs_done: 2,
    };
    let bytes = checkpoint_to_bytes(&ck)?;
    let back = checkpoint_from_bytes(&bytes)?;
    let same_outputs = ds.sequences.iter().all(|s| {
        let a = forward(&ck.net, &s.frames, Mode::Eval, 0).map(|r| r.0);
        let b = forward(&back.net, &s.frames, Mode::Eval, 0).map(|r| r.0);
        matches!((a, b), (Ok(a), Ok(b)) if a.iter().flatten().zip(b.iter().flatten()).all(|(p, q)| p.to_bits() == q.to_bits()))
    });
    Ok(back == ck && nets_bit_equal(&ck.net, &back.net) && same_outputs && checkpoint_to_bytes(&back)? == bytes)
}

fn training_reproducible() -> vidrefine::Result<bool> {
    let cfg = bench_model();
    let ds = noisy_dataset(24, 56)?;
    let run = |workers: usize| {
        let mut net = init_params(
            &NetworkDims {
                input: cfg.frame_len(),
                hidden: vec![8, 8],
            },
            56,
        );
        net.dropout = 0.3;
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 20,
            shuffle_seed: 56,
            workers,
            ..Default::default()
        };
        train(&ds.sequences, net, &cfg, &tc)
    };
    let first = run(1)?;
    let again = run(1)?;
    let parallel = run(4)?;
    let same = |a: &TrainOutcome, b: &TrainOutcome| {
        nets_bit_equal(&a.net, &b.net)
            && a.history.len() == b.history.len()
            && a.history
                .iter()
                .zip(&b.history)
                .all(|(x, y)| x.loss.total.to_bits() == y.loss.total.to_bits())
    };
    Ok(same(&first, &again) && same(&first, &parallel))
}

// ---------------------------------------------------------------- criterion 6

fn overfit() -> Verdict {
    match overfit_run() {
        Ok((initial, last, components)) => verdict(
            last <= 0.1 * initial && components.iter().all(|&(_, moved)| moved),
            format!(
                "initial loss {initial:.4}, final {last:.4} ({:.1}%), gradient reaches {}",
                100.0 * last / initial,
                components
                    .iter()
                    .map(|(n, moved)| format!("{n}={}", if *moved { "yes" } else { "no" }))
                    .collect::<Vec<_>>()
                    .join(" ")
            ),
        ),
        Err(e) => verdict(false, format!("run error: {e}")),
    }
}

type OverfitResult = (f64, f64, Vec<(&'static str, bool)>);

fn overfit_run() -> vidrefine::Result<OverfitResult> {
    let cfg = ModelConfig::with_grid(2, 1, 3, 4);
    let scene = SceneConfig::with_active_classes(3, &[0, 1, 2]);
    let corr = CorruptionConfig {
        class_flip_prob: 0.2,
        miss_prob: 0.2,
        conf_noise_std: 0.1,
        loc_jitter_std: 0.02,
        ..Default::default()
    };
    let ds = gen_dataset(4, "tiny", &scene, &corr, &cfg, 6)?;
    let mut net = init_params(
        &NetworkDims {
            input: cfg.frame_len(),
            hidden: vec![16, 16],
        },
        6,
    );
    net.dropout = 0.0;
    let tc = TrainConfig {
        epochs: 300,
        batch_size: 4,
        optimizer: RmsPropConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let initial = dataset_loss(&ds.sequences, &net, &cfg)?;

    // a term reaches the parameters when dropping its weight changes the gradient
    let truth = prepare_truth(&ds.sequences, &cfg)?;
    let items: Vec<BatchItem> = ds
        .sequences
        .iter()
        .zip(&truth)
        .map(|(s, t)| BatchItem {
            frames: &s.frames,
            truth: t,
            dropout_seed: 0,
        })
        .collect();
    let grad_of = |c: &ModelConfig| batch_gradient(&net, &items, c).map(|r| r.1);
    let full = grad_of(&cfg)?;
    let detection_only = grad_of(&ModelConfig {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        ..cfg.clone()
    })?;
    let differs = |g: &GruNetwork| !nets_bit_equal(g, &full);
    let components = vec![
        (
            "detection",
            detection_only.tensors().iter().any(|t| t.1.iter().any(|&v| v != 0.0)),
        ),
        ("similarity", differs(&grad_of(&ModelConfig { alpha: 0.0, ..cfg.clone() })?)),
        ("category", differs(&grad_of(&ModelConfig { beta: 0.0, ..cfg.clone() })?)),
        ("consistency", differs(&grad_of(&ModelConfig { gamma: 0.0, ..cfg.clone() })?)),
    ];

    let out = train(&ds.sequences, net, &cfg, &tc)?;
    let last = dataset_loss(&ds.sequences, &out.net, &cfg)?;
    Ok((initial.total, last.total, components))
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |k: u32| wanted.is_empty() || wanted.contains(&k);
    let mut cache = BenchCache::default();
    let mut all = true;
    let criteria: [(u32, &str, &mut dyn FnMut(&mut BenchCache) -> Verdict); 6] = [
        (1, "finite-difference gradients", &mut |_| gradients()),
        (2, "refinement beats pseudo-labels", &mut benchmark),
        (3, "loss-term ablation ordering", &mut ablation),
        (4, "evaluator oracles", &mut |_| evaluation()),
        (5, "invariants", &mut |_| invariants()),
        (6, "overfit tiny set", &mut |_| overfit()),
    ];
    for (k, name, check) in criteria {
        if !run(k) {
            continue;
        }
        let start = Instant::now();
        let v = check(&mut cache);
        all &= v.pass;
        println!(
            "criterion {k} {}: {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
