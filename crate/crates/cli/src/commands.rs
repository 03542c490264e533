use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use vidrefine::gradcheck::{run_suite, GradcheckConfig};
use vidrefine::grid::{decode_flat, ModelConfig};
use vidrefine::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint};
use vidrefine::optimizer::RmsPropConfig;
use vidrefine::rnn::{forward, init_params, Candidate, Mode, NetworkDims};
use vidrefine::synthdata::{gen_dataset, CorruptionConfig, SceneConfig};
use vidrefine::trainer::{evaluate_pseudo_labels, evaluate_split, train_with, EpochRecord, TrainConfig, TrainHooks};

use crate::config::{pick, FileConfig};
use crate::{EvalArgs, GradcheckArgs, InferArgs, SynthArgs, TrainArgs};

/// A failure with its own diagnostic kind.
#[derive(Debug)]
struct Failure {
    kind: &'static str,
    msg: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

/// Stable kind of the first recognised cause.
pub fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(v) = cause.downcast_ref::<vidrefine::Error>() {
            return v.kind();
        }
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if cause.is::<toml::de::Error>() {
            return "config_error";
        }
        if cause.is::<io::Error>() {
            return "io_error";
        }
    }
    "error"
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

pub fn synth(a: &SynthArgs, file: &FileConfig) -> Result<()> {
    let f = &file.synth;
    let cfg = ModelConfig::with_grid(
        pick(a.s, f.s, 7),
        pick(a.b, f.b, 2),
        pick(a.c, f.c, 20),
        pick(a.t, f.t, 30),
    );
    cfg.validate()?;
    let active = pick(a.active.clone(), f.active.clone(), (0..cfg.c).collect());
    let sc = &file.scene;
    let mut scene = SceneConfig::with_active_classes(cfg.c, &active);
    scene.min_objects = pick(a.min_objects, sc.min_objects, scene.min_objects);
    scene.max_objects = pick(a.max_objects, sc.max_objects, scene.max_objects);
    scene.max_speed = pick(a.max_speed, sc.max_speed, scene.max_speed);
    scene.jitter_std = pick(a.jitter_std, sc.jitter_std, scene.jitter_std);
    scene.min_size = pick(a.min_size, sc.min_size, scene.min_size);
    scene.max_size = pick(a.max_size, sc.max_size, scene.max_size);
    scene.distinct_classes = sc.distinct_classes.unwrap_or(scene.distinct_classes);
    let co = &file.corruption;
    let defaults = CorruptionConfig::default();
    let corruption = CorruptionConfig {
        class_flip_prob: pick(a.class_flip_prob, co.class_flip_prob, 0.2),
        miss_prob: pick(a.miss_prob, co.miss_prob, 0.2),
        miss_residual: pick(a.miss_residual, co.miss_residual, defaults.miss_residual),
        conf_noise_std: pick(a.conf_noise_std, co.conf_noise_std, 0.1),
        loc_jitter_std: pick(a.loc_jitter_std, co.loc_jitter_std, 0.02),
        flip_targets: Some(active.clone()),
    };
    let ds = gen_dataset(
        pick(a.sequences, f.sequences, 100),
        &pick(a.prefix.clone(), f.prefix.clone(), "seq".to_string()),
        &scene,
        &corruption,
        &cfg,
        pick(a.seed, f.seed, 0),
    )?;
    save_dataset(&a.out, &ds)?;
    eprintln!("wrote {} sequences to {}", ds.sequences.len(), a.out.display());
    Ok(())
}

fn model_config(base: ModelConfig, flags: &crate::ModelFlags, file: &FileConfig) -> ModelConfig {
    let m = &file.model;
    ModelConfig {
        alpha: pick(flags.alpha, m.alpha, base.alpha),
        beta: pick(flags.beta, m.beta, base.beta),
        gamma: pick(flags.gamma, m.gamma, base.gamma),
        lambda_coord: pick(flags.lambda_coord, m.lambda_coord, base.lambda_coord),
        lambda_noobj: pick(flags.lambda_noobj, m.lambda_noobj, base.lambda_noobj),
        detect_threshold: pick(flags.detect_threshold, m.detect_threshold, base.detect_threshold),
        nms_iou: pick(flags.nms_iou, m.nms_iou, base.nms_iou),
        ..base
    }
}

pub fn train(a: &TrainArgs, file: &FileConfig) -> Result<()> {
    let data = load_dataset(&a.data)?;
    data.validate()?;
    let grid = ModelConfig::with_grid(data.s, data.b, data.c, data.t);
    let cfg = model_config(grid, &a.model, file);
    cfg.validate()?;

    let tf = &file.train;
    let base = RmsPropConfig::default();
    let optimizer = RmsPropConfig {
        lr: pick(a.lr, tf.lr, base.lr),
        rho: pick(a.rho, tf.rho, base.rho),
        momentum: pick(a.momentum, tf.momentum, base.momentum),
        eps: pick(a.eps, tf.eps, base.eps),
        clip: a.clip.or(tf.clip),
    };
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        epochs: pick(a.epochs, tf.epochs, defaults.epochs),
        batch_size: pick(a.batch_size, tf.batch_size, defaults.batch_size),
        shuffle_seed: pick(a.shuffle_seed, tf.shuffle_seed, defaults.shuffle_seed),
        eval_every: pick(a.eval_every, tf.eval_every, if a.eval_data.is_some() { 1 } else { 0 }),
        workers: pick(a.workers, tf.workers, defaults.workers),
        optimizer,
    };

    let nf = &file.network;
    let (net, resume, start_epoch, init_seed) = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            data.check_grid(&ck.model)?;
            (ck.net, ck.optimizer, ck.epochs_done, ck.init_seed)
        }
        None => {
            let init_seed = pick(a.init_seed, nf.init_seed, 0);
            let dims = NetworkDims {
                input: cfg.frame_len(),
                hidden: pick(a.hidden.clone(), nf.hidden.clone(), vec![150, 150]),
            };
            let mut net = init_params(&dims, init_seed);
            net.dropout = pick(a.dropout, nf.dropout, 0.5);
            let name = pick(a.candidate.clone(), nf.candidate.clone(), "sigmoid".into());
            net.candidate = Candidate::parse(&name).ok_or_else(|| Failure {
                kind: "invalid_config",
                msg: format!("unknown candidate activation {name:?} (expected sigmoid or tanh)"),
            })?;
            (net, None, 0, init_seed)
        }
    };

    let eval_data = a.eval_data.as_ref().map(load_dataset).transpose()?;
    if let Some(ev) = &eval_data {
        ev.check_grid(&cfg)?;
    }
    let mut log = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
            as Box<dyn Write>,
        None => Box::new(io::stderr()),
    };
    let mut log_err = None;
    let mut on_epoch = |r: &EpochRecord| {
        if let Err(e) = writeln!(log, "{r}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    };
    let out = train_with(
        &data.sequences,
        net,
        &cfg,
        &tc,
        TrainHooks {
            resume,
            start_epoch,
            eval_split: eval_data.as_ref().map(|d| d.sequences.as_slice()),
            on_epoch: Some(&mut on_epoch),
        },
    )?;
    if let Some(e) = log_err {
        return Err(e).context("writing history log");
    }
    save_checkpoint(
        &a.out,
        &Checkpoint {
            model: cfg,
            net: out.net,
            optimizer: Some(out.optimizer),
            init_seed,
            shuffle_seed: tc.shuffle_seed,
            epochs_done: start_epoch + tc.epochs,
        },
    )?;
    Ok(())
}

fn load_pair(ck_path: &Path, data_path: &Path) -> Result<(Checkpoint, vidrefine::Dataset)> {
    let ck = load_checkpoint(ck_path)?;
    let data = load_dataset(data_path)?;
    data.check_grid(&ck.model)?;
    Ok((ck, data))
}

fn decode_config(ck: &Checkpoint, t: usize, threshold: Option<f64>, nms: Option<f64>, file: &FileConfig) -> ModelConfig {
    ModelConfig {
        t,
        detect_threshold: pick(threshold, file.model.detect_threshold, ck.model.detect_threshold),
        nms_iou: pick(nms, file.model.nms_iou, ck.model.nms_iou),
        ..ck.model.clone()
    }
}

pub fn eval(a: &EvalArgs, file: &FileConfig) -> Result<()> {
    let (ck, data) = load_pair(&a.checkpoint, &a.data)?;
    let cfg = decode_config(&ck, data.t, a.detect_threshold, a.nms_iou, file);
    cfg.validate()?;
    let report = evaluate_split(&data.sequences, &ck.net, &cfg)?;
    let mut out = output(a.out.as_deref())?;
    let render = |r: &vidrefine::evaluator::EvalReport| if a.records { r.to_records() } else { r.to_text(None) };
    write!(out, "{}", render(&report))?;
    if a.baseline {
        let raw = evaluate_pseudo_labels(&data.sequences, &cfg)?;
        if a.records {
            for line in raw.to_records().lines() {
                writeln!(out, "baseline {line}")?;
            }
        } else {
            writeln!(out, "\npseudo-labels")?;
            write!(out, "{}", raw.to_text(None))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn infer(a: &InferArgs, file: &FileConfig) -> Result<()> {
    let (ck, data) = load_pair(&a.checkpoint, &a.data)?;
    let cfg = decode_config(&ck, data.t, a.detect_threshold, a.nms_iou, file);
    cfg.validate()?;
    let seq = match (&a.sequence, a.index) {
        (Some(id), _) => data.sequences.iter().find(|s| &s.id == id),
        (None, Some(i)) => data.sequences.get(i),
        (None, None) => data.sequences.first(),
    }
    .ok_or_else(|| Failure {
        kind: "not_found",
        msg: "requested sequence is not in the dataset".into(),
    })?;
    let (preds, _) = forward(&ck.net, &seq.frames, Mode::Eval, 0)?;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "sequence id={} frames={}", seq.id, preds.len())?;
    for (t, p) in preds.iter().enumerate() {
        for d in decode_flat(p, &cfg)? {
            let b = d.bbox;
            writeln!(
                out,
                "det frame={t} class={} score={} cx={} cy={} w={} h={}",
                d.class_id, d.score, b.cx, b.cy, b.w, b.h
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let gc = GradcheckConfig {
        instances: a.instances,
        seed: a.seed,
        ..Default::default()
    };
    let reports = run_suite(&gc)?;
    let mut worst: Option<&str> = None;
    for r in &reports {
        let ok = r.max_rel_error <= a.tolerance;
        println!(
            "component={} max_rel_error={:e} checked={} status={}",
            r.name,
            r.max_rel_error,
            r.checked,
            if ok { "ok" } else { "fail" }
        );
        if !ok && worst.is_none() {
            worst = Some(r.name);
        }
    }
    if let Some(name) = worst {
        return Err(Failure {
            kind: "gradcheck_failed",
            msg: format!("component {name} exceeds relative error {}", a.tolerance),
        }
        .into());
    }
    Ok(())
}
