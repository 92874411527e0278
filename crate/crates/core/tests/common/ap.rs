//! Independent AP oracle and randomized micro-cases shared by the metrics
//! tests and the acceptance harness.

use maft_core::metrics::InstanceResult;
use maft_core::scene::{GroundTruth, GtInstance};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TOKENS: usize = 12;

pub fn result(mask: Vec<bool>, class: usize, score: f64, query: usize) -> InstanceResult {
    InstanceResult { mask, class, score, center: [0.0; 3], query }
}

pub fn random_mask(rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..TOKENS).map(|_| rng.gen_bool(0.35)).collect();
    let k = rng.gen_range(0..TOKENS);
    m[k] = true;
    m
}

/// A scene of ≤ 5 GT and ≤ 10 predictions over 3 classes, with predictions
/// that are often noisy copies of GT masks.
pub fn micro_case(rng: &mut ChaCha8Rng) -> (GroundTruth, Vec<InstanceResult>) {
    let m = rng.gen_range(0..=5);
    let instances: Vec<GtInstance> = (0..m)
        .map(|_| GtInstance { mask: random_mask(rng), class: rng.gen_range(0..3), center: [0.0; 3] })
        .collect();
    let p = rng.gen_range(0..=10);
    let results = (0..p)
        .map(|q| {
            let (mask, class) = if m > 0 && rng.gen_bool(0.7) {
                let g = &instances[rng.gen_range(0..m)];
                let mut mask: Vec<bool> = g.mask.iter().map(|&b| if rng.gen_bool(0.15) { !b } else { b }).collect();
                if !mask.contains(&true) {
                    mask[rng.gen_range(0..TOKENS)] = true;
                }
                (mask, if rng.gen_bool(0.8) { g.class } else { rng.gen_range(0..3) })
            } else {
                (random_mask(rng), rng.gen_range(0..3))
            };
            // Coarse scores so ties occur.
            result(mask, class, rng.gen_range(1..=5) as f64 / 5.0, q)
        })
        .collect();
    (GroundTruth { instances, num_tokens: TOKENS }, results)
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

/// AP by enumerating the PR curve and averaging the interpolated precision
/// at each recall level `i / n_gt`.
pub fn oracle_ap(scenes: &[(GroundTruth, Vec<InstanceResult>)], class: usize, thr: f64) -> Option<f64> {
    let n_gt: usize = scenes.iter().map(|(g, _)| g.instances.iter().filter(|i| i.class == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (s, (gt, res)) in scenes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..res.len()).filter(|&r| res[r].class == class).collect();
        idx.sort_by(|&a, &b| res[b].score.partial_cmp(&res[a].score).unwrap().then(a.cmp(&b)));
        let mut used = vec![false; gt.instances.len()];
        for (rank, r) in idx.into_iter().enumerate() {
            let mut best: Option<usize> = None;
            for (k, g) in gt.instances.iter().enumerate() {
                let v = iou(&res[r].mask, &g.mask);
                if !used[k] && g.class == class && v >= thr && best.is_none_or(|b| v > iou(&res[r].mask, &gt.instances[b].mask)) {
                    best = Some(k);
                }
            }
            if let Some(k) = best {
                used[k] = true;
            }
            ranked.push((res[r].score, s, rank, best.is_some()));
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (j, r) in ranked.iter().enumerate() {
        tp += usize::from(r.3);
        points.push((tp, tp as f64 / (j + 1) as f64));
    }
    let ap: f64 = (1..=n_gt)
        .map(|i| points.iter().filter(|(t, _)| *t >= i).map(|(_, p)| *p).fold(0.0, f64::max))
        .sum::<f64>()
        / n_gt as f64;
    Some(ap)
}

pub fn oracle_map(scenes: &[(GroundTruth, Vec<InstanceResult>)], thr: f64) -> Option<f64> {
    let aps: Vec<f64> = (0..3).filter_map(|c| oracle_ap(scenes, c, thr)).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn views(scenes: &[(GroundTruth, Vec<InstanceResult>)]) -> Vec<(&[InstanceResult], &GroundTruth)> {
    scenes.iter().map(|(g, r)| (r.as_slice(), g)).collect()
}
