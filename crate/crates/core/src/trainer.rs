//! Mini-batch training with RMSProp.
//!
//! Per-sequence work inside a batch runs on a rayon pool. Sequences are
//! grouped into fixed-size chunks that are summed in order, so the result
//! does not depend on how many workers execute them.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::evaluator::{match_detections, EvalReport, MatchResult, DEFAULT_MATCH_IOU};
use crate::grid::{decode_flat, encode_ground_truth, GroundTruthFrame, ModelConfig};
use crate::losses::{total_loss, LossBreakdown};
use crate::optimizer::{OptState, RmsPropConfig};
use crate::rnn::{backward_into, forward, GruNetwork, Mode};
use crate::synthdata::mix_seed;

/// Sequences summed together before the ordered cross-chunk reduction.
const CHUNK: usize = 8;
const DROPOUT_STREAM: u64 = 0xD50F;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Evaluate on the held-out split every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Worker threads; 0 lets rayon decide.
    pub workers: usize,
    pub optimizer: RmsPropConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 128,
            shuffle_seed: 0,
            eval_every: 0,
            workers: 1,
            optimizer: RmsPropConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's sequences.
    pub loss: LossBreakdown,
    pub eval_map: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(
            f,
            "epoch={} d_loss={} s_loss={} c_loss={} pc_loss={} total={}",
            self.epoch, l.detection, l.similarity, l.category, l.consistency, l.total
        )?;
        if let Some(m) = self.eval_map {
            write!(f, " map={m}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: GruNetwork,
    pub history: Vec<EpochRecord>,
    pub optimizer: OptState,
}

/// Optional extras for [`train_with`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Optimizer state to continue from.
    pub resume: Option<OptState>,
    /// Number of epochs already completed; seeds depend on the absolute epoch.
    pub start_epoch: usize,
    /// Split scored every `eval_every` epochs.
    pub eval_split: Option<&'a [Sequence]>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// One sequence's contribution to a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub frames: &'a [Vec<f64>],
    pub truth: &'a GroundTruthFrame,
    pub dropout_seed: u64,
}

fn check_net(net: &GruNetwork, cfg: &ModelConfig) -> Result<()> {
    net.validate()?;
    if net.input_dim() != cfg.frame_len() || net.output_dim() != cfg.frame_len() {
        return Err(Error::ConfigMismatch(format!(
            "network maps {} -> {} but frames have length {}",
            net.input_dim(),
            net.output_dim(),
            cfg.frame_len()
        )));
    }
    Ok(())
}

/// Final-frame targets for every sequence, after shape checks.
pub fn prepare_truth(dataset: &[Sequence], cfg: &ModelConfig) -> Result<Vec<GroundTruthFrame>> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let t = first.len();
    if t == 0 {
        return Err(Error::InconsistentSequence {
            seq_id: first.id.clone(),
            expected: 1,
            got: 0,
        });
    }
    dataset
        .iter()
        .map(|seq| {
            if seq.len() != t {
                return Err(Error::InconsistentSequence {
                    seq_id: seq.id.clone(),
                    expected: t,
                    got: seq.len(),
                });
            }
            for (i, f) in seq.frames.iter().enumerate() {
                if f.len() != cfg.frame_len() {
                    return Err(Error::FrameLength {
                        seq_id: seq.id.clone(),
                        frame: i,
                        expected: cfg.frame_len(),
                        got: f.len(),
                    });
                }
            }
            seq.final_truth(cfg)
        })
        .collect()
}

/// Loss of one sequence and its gradient, added into `grads`.
pub fn accumulate_sequence(
    net: &GruNetwork,
    item: &BatchItem<'_>,
    cfg: &ModelConfig,
    grads: &mut GruNetwork,
) -> Result<LossBreakdown> {
    let (preds, cache) = forward(net, item.frames, Mode::Train, item.dropout_seed)?;
    let (loss, grad_out) = total_loss(&preds, item.frames, item.truth, cfg)?;
    backward_into(net, &cache, &grad_out, grads)?;
    Ok(loss)
}

/// Summed loss and mean gradient over `items`.
pub fn batch_gradient(
    net: &GruNetwork,
    items: &[BatchItem<'_>],
    cfg: &ModelConfig,
) -> Result<(LossBreakdown, GruNetwork)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let partials: Vec<(LossBreakdown, GruNetwork)> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = net.zeros_like();
            let mut loss = LossBreakdown::default();
            for item in chunk {
                loss.add(&accumulate_sequence(net, item, cfg, &mut grads)?);
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;

    let mut parts = partials.into_iter();
    let (mut loss, mut grads) = parts.next().expect("non-empty");
    for (l, g) in parts {
        loss.add(&l);
        grads.add_scaled(&g, 1.0);
    }
    grads.scale(1.0 / items.len() as f64);
    Ok((loss, grads))
}

fn epoch_seed(shuffle_seed: u64, epoch: usize) -> u64 {
    mix_seed(shuffle_seed, epoch as u64)
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

pub fn train(dataset: &[Sequence], net: GruNetwork, cfg: &ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, net, cfg, tc, TrainHooks::default())
}

/// Full training loop. Each epoch shuffles with a seed derived from
/// `shuffle_seed` and the epoch number, walks the batches in order (the last
/// one may be short) and takes one optimizer step per batch.
pub fn train_with(
    dataset: &[Sequence],
    mut net: GruNetwork,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    check_net(&net, cfg)?;
    let truth = prepare_truth(dataset, cfg)?;
    let TrainHooks {
        resume,
        start_epoch,
        eval_split,
        mut on_epoch,
    } = hooks;
    let mut opt = match resume {
        Some(mut st) => {
            st.config = tc.optimizer;
            st
        }
        None => OptState::for_network(tc.optimizer, &net),
    };

    let pool = build_pool(tc.workers)?;
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in start_epoch..start_epoch + tc.epochs {
        let seed = epoch_seed(tc.shuffle_seed, epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

        let mut sum = LossBreakdown::default();
        for batch in order.chunks(tc.batch_size) {
            let items: Vec<BatchItem<'_>> = batch
                .iter()
                .map(|&i| BatchItem {
                    frames: &dataset[i].frames,
                    truth: &truth[i],
                    dropout_seed: mix_seed(seed ^ DROPOUT_STREAM, i as u64),
                })
                .collect();
            let (loss, grads) = pool.install(|| batch_gradient(&net, &items, cfg))?;
            opt.step_network(&mut net, &grads)?;
            sum.add(&loss);
        }

        let done = epoch + 1;
        let eval_map = match eval_split {
            Some(split) if tc.eval_every > 0 && done % tc.eval_every == 0 => {
                Some(pool.install(|| evaluate_split(split, &net, cfg))?.map)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch: done,
            loss: sum.scaled(1.0 / dataset.len() as f64),
            eval_map,
        };
        if let Some(cb) = on_epoch.as_mut() {
            cb(&record);
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        net,
        history,
        optimizer: opt,
    })
}

/// Mean loss over a dataset with dropout disabled.
pub fn dataset_loss(dataset: &[Sequence], net: &GruNetwork, cfg: &ModelConfig) -> Result<LossBreakdown> {
    check_net(net, cfg)?;
    let truth = prepare_truth(dataset, cfg)?;
    let losses: Vec<LossBreakdown> = dataset
        .par_iter()
        .zip(&truth)
        .map(|(seq, gt)| {
            let (preds, _) = forward(net, &seq.frames, Mode::Eval, 0)?;
            Ok(total_loss(&preds, &seq.frames, gt, cfg)?.0)
        })
        .collect::<Result<_>>()?;
    let mut sum = LossBreakdown::default();
    losses.iter().for_each(|l| sum.add(l));
    Ok(sum.scaled(1.0 / dataset.len() as f64))
}

fn score_frames<'a>(
    frames: impl ParallelIterator<Item = (&'a [f64], Result<GroundTruthFrame>)>,
    cfg: &ModelConfig,
) -> Result<EvalReport> {
    let per_frame: Vec<MatchResult> = frames
        .map(|(v, gt)| {
            let gt = gt?;
            let dets = decode_flat(v, cfg)?;
            let kept: Vec<_> = gt.kept_objects().collect();
            Ok(match_detections(&dets, &kept, DEFAULT_MATCH_IOU, cfg.c))
        })
        .collect::<Result<_>>()?;
    let mut pooled = MatchResult::empty(cfg.c);
    per_frame.iter().for_each(|m| pooled.extend(m));
    let all: Vec<usize> = (0..cfg.c).collect();
    Ok(EvalReport::from_matches(&pooled, &all))
}

/// Refined predictions of every sequence (eval mode).
pub fn predict_all(dataset: &[Sequence], net: &GruNetwork, cfg: &ModelConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    check_net(net, cfg)?;
    dataset
        .par_iter()
        .map(|seq| Ok(forward(net, &seq.frames, Mode::Eval, 0)?.0))
        .collect()
}

/// Scores the final-step refined predictions against final-frame truth.
/// Classes without ground truth in the split are not averaged.
pub fn evaluate_split(dataset: &[Sequence], net: &GruNetwork, cfg: &ModelConfig) -> Result<EvalReport> {
    let preds = predict_all(dataset, net, cfg)?;
    score_frames(
        dataset.par_iter().zip(&preds).map(|(seq, p)| {
            let last = p.last().map_or(&[][..], Vec::as_slice);
            (last, seq.final_truth(cfg))
        }),
        cfg,
    )
}

/// Same scoring applied to the raw final pseudo-labels.
pub fn evaluate_pseudo_labels(dataset: &[Sequence], cfg: &ModelConfig) -> Result<EvalReport> {
    score_frames(
        dataset.par_iter().map(|seq| {
            let last = seq.frames.last().map_or(&[][..], Vec::as_slice);
            (last, seq.final_truth(cfg))
        }),
        cfg,
    )
}

/// One report per step index, scoring refined predictions on every
/// annotated frame at that step.
pub fn evaluate_steps(dataset: &[Sequence], net: &GruNetwork, cfg: &ModelConfig) -> Result<Vec<EvalReport>> {
    let preds = predict_all(dataset, net, cfg)?;
    let steps = dataset.iter().map(Sequence::len).max().unwrap_or(0);
    (0..steps)
        .map(|t| {
            let frames: Vec<(&[f64], Result<GroundTruthFrame>)> = dataset
                .iter()
                .zip(&preds)
                .filter_map(|(seq, p)| {
                    let objs = seq.annotations.get(&t)?;
                    Some((p.get(t)?.as_slice(), encode_ground_truth(objs, cfg)))
                })
                .collect();
            score_frames(frames.into_par_iter(), cfg)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightChoice {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub map: f64,
}

/// Trains from `init` once per `(alpha, beta, gamma)` in `grid` and scores
/// each result on `val`. Results follow grid order.
pub fn grid_search_weights(
    train_set: &[Sequence],
    val: &[Sequence],
    init: &GruNetwork,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    grid: &[(f64, f64, f64)],
) -> Result<Vec<WeightChoice>> {
    grid.iter()
        .map(|&(alpha, beta, gamma)| {
            let c = ModelConfig {
                alpha,
                beta,
                gamma,
                ..cfg.clone()
            };
            let out = train(train_set, init.clone(), &c, tc)?;
            let map = build_pool(tc.workers)?.install(|| evaluate_split(val, &out.net, &c))?.map;
            Ok(WeightChoice {
                alpha,
                beta,
                gamma,
                map,
            })
        })
        .collect()
}

/// Highest validation mAP; the earliest grid entry wins ties.
pub fn best_choice(choices: &[WeightChoice]) -> Option<WeightChoice> {
    choices
        .iter()
        .copied()
        .fold(None, |best: Option<WeightChoice>, c| match best {
            Some(b) if b.map >= c.map => Some(b),
            _ => Some(c),
        })
}
