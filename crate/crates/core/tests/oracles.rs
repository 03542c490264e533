//! Independent reference values and brute-force oracles.

mod common;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidrefine::geometry::{nms, BoxGeometry};
use vidrefine::grid::{LabeledObject, ModelConfig};
use vidrefine::rnn::{gru_step, Candidate, GruLayerParams, GruNetwork, NetworkDims};
use vidrefine::trainer::evaluate_split;
use vidrefine::Sequence;

fn hand_layer() -> GruLayerParams {
    let mut p = GruLayerParams::zeros(3, 2);
    p.w_xr = vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
    p.w_xu = vec![-0.3, 0.2, 0.1, -0.1, 0.25, 0.05];
    p.w_xc = vec![0.7, -0.4, -0.2, 0.3, 0.1, 0.2];
    p.w_hr = vec![0.5, -0.6, 0.2, 0.1];
    p.w_hu = vec![-0.4, 0.3, 0.6, -0.2];
    p.w_hc = vec![0.9, 0.1, -0.3, 0.8];
    p.b_r = vec![0.05, -0.1];
    p.b_u = vec![0.2, 0.0];
    p.b_c = vec![-0.15, 0.3];
    p
}

#[test]
fn gru_step_matches_extended_precision_reference() {
    // evaluated with 50 significant digits
    let cases = [
        (Candidate::Sigmoid, [0.479_280_071_998_417_196_27, 0.034_952_964_325_431_170_442]),
        (Candidate::Tanh, [0.459_533_772_803_963_237_04, -0.364_087_478_078_863_911_19]),
    ];
    for (cand, want) in cases {
        let step = gru_step(&hand_layer(), cand, &[0.5, -1.25, 2.0], &[0.3, -0.7]).unwrap();
        for (got, want) in step.h.iter().zip(want) {
            assert!((got - want).abs() < 1e-14, "{cand:?}: {got} vs {want}");
        }
    }
}

#[test]
fn nms_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let dets = common::random_detections(&mut rng);
        for thr in [0.3, 0.5, 0.7] {
            assert_eq!(nms(&dets, thr), common::brute_force_nms(&dets, thr));
        }
    }
}

fn identity_net(dim: usize) -> GruNetwork {
    let mut net = GruNetwork::zeros(&NetworkDims {
        input: dim,
        hidden: vec![],
    });
    for i in 0..dim {
        net.out_w[i * dim + i] = 1.0;
    }
    net
}

/// Writes one predicted box into a flat frame (B = 1).
fn put(frame: &mut [f64], cfg: &ModelConfig, cell: usize, local: [f64; 4], conf: f64, class_id: usize) {
    let o = cfg.box_offset(cell, 0);
    frame[o..o + 4].copy_from_slice(&local);
    frame[o + 4] = conf;
    frame[cfg.class_offset(cell) + class_id] = 1.0;
}

fn seq(id: &str, frame: Vec<f64>, truth: Vec<LabeledObject>) -> Sequence {
    Sequence {
        id: id.into(),
        frames: vec![frame],
        annotations: BTreeMap::from([(0, truth)]),
    }
}

#[test]
fn hand_scored_split() {
    let cfg = ModelConfig::with_grid(2, 1, 3, 1);
    let obj = |class_id, cx, cy| LabeledObject {
        class_id,
        bbox: BoxGeometry::new(cx, cy, 0.3, 0.3),
    };
    let good = [0.5, 0.5, 0.3, 0.3];
    let n = cfg.frame_len();

    let mut f0 = vec![0.0; n];
    put(&mut f0, &cfg, 0, good, 0.9, 0);
    let mut f1 = vec![0.0; n];
    put(&mut f1, &cfg, 3, [0.5, 0.5, 0.05, 0.05], 0.6, 0);
    put(&mut f1, &cfg, 1, good, 0.8, 0);
    let mut f2 = vec![0.0; n];
    put(&mut f2, &cfg, 2, good, 0.7, 1);
    put(&mut f2, &cfg, 1, good, 0.5, 0);
    let split = vec![
        seq("a", f0, vec![obj(0, 0.25, 0.25)]),
        seq("b", f1, vec![obj(0, 0.75, 0.75)]),
        seq("c", f2, vec![obj(1, 0.25, 0.75), obj(0, 0.75, 0.25)]),
    ];

    // class 0 ranking: TP 0.9, FP 0.8, FP 0.6, TP 0.5 over 3 truths
    //   recall 1/3 holds precision 1 for k = 0..=3, recall 2/3 gives 1/2 for k = 4..=6
    //   AP = (4 + 3/2) / 11 = 1/2; class 1 scores 1; class 2 has no truth
    let report = evaluate_split(&split, &identity_net(n), &cfg).unwrap();
    let aps: Vec<(usize, f64)> = report.classes.iter().map(|c| (c.class_id, c.ap)).collect();
    assert_eq!(aps.len(), 2);
    assert!((aps[0].1 - 0.5).abs() < 1e-12 && aps[0].0 == 0);
    assert!((aps[1].1 - 1.0).abs() < 1e-12 && aps[1].0 == 1);
    assert!((report.map - 0.75).abs() < 1e-12);
}
