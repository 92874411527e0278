#![allow(dead_code)]

pub mod ap;

use maft_core::config::Config;
use maft_core::data::PreparedScene;
use maft_core::decoder::{Model, ModelConfig};
use maft_core::par::Exec;
use maft_core::scene::Scene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Hand-built scene of `n` well-separated points: three blobs plus clutter.
pub fn small_scene(n: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = [[0.4, 0.5, 0.3], [1.6, 0.6, 0.4], [1.0, 1.7, 0.5]];
    let classes = [2i32, 7, 11];
    let mut scene = Scene { points: vec![], colors: vec![], sem_label: vec![], inst_label: vec![], num_classes: 18 };
    for i in 0..n {
        let blob = i % 4;
        let (p, c, s, id) = if blob < 3 {
            let a = anchors[blob];
            let p = [0, 1, 2].map(|k| a[k] + rng.gen_range(-0.25..0.25));
            (p, [0.2 * blob as f64, 0.5, 0.9 - 0.3 * blob as f64], classes[blob], blob as i32)
        } else {
            ([rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.2), 0.0], [0.5; 3], -1, -1)
        };
        scene.points.push(p);
        scene.colors.push(c);
        scene.sem_label.push(s);
        scene.inst_label.push(id);
    }
    scene
}

/// Small scene voxelized at a size fine enough to keep every point.
pub fn prepared(n: usize, seed: u64) -> PreparedScene {
    PreparedScene::from_scene(&small_scene(n, seed), 1e-4, 8, Exec::Sequential).unwrap()
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig { d: 16, heads: 2, ffn: 24, queries: 8, knn: 8, ..ModelConfig::default() }
}

pub fn tiny_model(seed: u64) -> Model {
    Model::new(tiny_model_config(), seed).unwrap()
}

pub fn tiny_config() -> Config {
    Config { model: tiny_model_config(), ..Config::default() }
}

/// Exhaustive minimum over injective GT → query maps, enumerated in
/// lexicographic order so the first optimum found is the smallest.
/// `cost` is `n` queries × `m` GT; returns `(query_of_gt, total)`.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    fn go(cost: &[Vec<f64>], k: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, acc: f64, best: &mut Option<(Vec<usize>, f64)>) {
        let m = cost.first().map_or(0, Vec::len);
        if k == m {
            if best.as_ref().is_none_or(|(_, b)| acc < *b) {
                *best = Some((cur.clone(), acc));
            }
            return;
        }
        for q in 0..cost.len() {
            if !used[q] {
                used[q] = true;
                cur.push(q);
                go(cost, k + 1, used, cur, acc + cost[q][k], best);
                cur.pop();
                used[q] = false;
            }
        }
    }
    let mut best = None;
    go(cost, 0, &mut vec![false; cost.len()], &mut Vec::new(), 0.0, &mut best);
    best.unwrap_or((Vec::new(), 0.0))
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, integer: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..m).map(|_| if integer { rng.gen_range(0..5) as f64 } else { rng.gen_range(-1.0..1.0) }).collect())
        .collect()
}
