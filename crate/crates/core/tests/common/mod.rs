//! Oracles shared by several test targets.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vidrefine::geometry::{iou, BoxGeometry, Detection};

/// Greedy NMS output is the unique subset `K` where each detection, visited
/// in rank order, belongs to `K` exactly when it overlaps no earlier member
/// of its class at or above the threshold. Enumerate every subset per class.
pub fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        by_class.entry(dets[i].class_id).or_default().push(i);
    }
    let mut kept = vec![false; dets.len()];
    for members in by_class.values() {
        let n = members.len();
        let mut found = 0;
        for mask in 0u32..(1 << n) {
            let consistent = (0..n).all(|a| {
                let blocked = (0..a).any(|b| mask & (1 << b) != 0 && iou(&dets[members[a]].bbox, &dets[members[b]].bbox) >= thr);
                (mask & (1 << a) != 0) == !blocked
            });
            if consistent {
                found += 1;
                for a in 0..n {
                    kept[members[a]] = mask & (1 << a) != 0;
                }
            }
        }
        assert_eq!(found, 1, "greedy fixed point must be unique");
    }
    order.into_iter().filter(|&i| kept[i]).map(|i| dets[i]).collect()
}

pub fn random_detections(rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let n = rng.gen_range(0..=20);
    let mut per_class = [0usize; 4];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let class_id = rng.gen_range(0..4);
        if per_class[class_id] == 12 {
            continue;
        }
        per_class[class_id] += 1;
        // coarse scores and positions make ties and heavy overlap common
        out.push(Detection {
            class_id,
            bbox: BoxGeometry::new(
                rng.gen_range(0..5) as f64 * 0.05 + 0.3,
                rng.gen_range(0..5) as f64 * 0.05 + 0.3,
                rng.gen_range(1..5) as f64 * 0.1,
                rng.gen_range(1..5) as f64 * 0.1,
            ),
            score: rng.gen_range(1..6) as f64 / 5.0,
        });
    }
    out
}
