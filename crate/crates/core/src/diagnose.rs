//! Diagnostics: gradient verification on a small probe scene and per-epoch
//! initial-mask recall replayed from checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::PreparedScene;
use crate::decoder::Model;
use crate::matchloss::compute_loss;
use crate::metrics::{covered_instances, RECALL_THRESHOLDS};
use crate::numcore::selfcheck::{primitive_suite, PrimitiveCheck};
use crate::numcore::{relative_error, Graph, DEFAULT_STEP};
use crate::par::Exec;
use crate::scene::Scene;
use crate::train::{scene_step, TrainError};

/// End-to-end gradient errors at or above this fail the check.
pub const GRAD_TOLERANCE: f64 = 1e-3;

/// `n` points in three labelled blobs plus unlabelled floor clutter, spaced
/// so that a fine voxel grid keeps one token per point.
pub fn probe_scene(n: usize, seed: u64, num_classes: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = [[0.4, 0.5, 0.3], [1.6, 0.6, 0.4], [1.0, 1.7, 0.5]];
    let mut scene = Scene { points: vec![], colors: vec![], sem_label: vec![], inst_label: vec![], num_classes };
    for i in 0..n {
        let blob = i % 4;
        if blob < 3 {
            let a = anchors[blob];
            scene.points.push([0, 1, 2].map(|k| a[k] + rng.gen_range(-0.25..0.25)));
            scene.colors.push([0.2 * blob as f64, 0.5, 0.9 - 0.3 * blob as f64]);
            scene.sem_label.push(((2 + 5 * blob) % num_classes) as i32);
            scene.inst_label.push(blob as i32);
        } else {
            scene.points.push([rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.2), 0.0]);
            scene.colors.push([0.5; 3]);
            scene.sem_label.push(-1);
            scene.inst_label.push(-1);
        }
    }
    scene
}

pub fn probe_prepared(n: usize, seed: u64, config: &Config) -> Result<PreparedScene, TrainError> {
    let scene = probe_scene(n, seed, config.model.num_classes);
    Ok(PreparedScene::from_scene(&scene, 1e-4, config.model.knn, Exec::Sequential)?)
}

fn loss_value(model: &Model, scene: &PreparedScene, config: &Config) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &scene.tokens, &scene.knn, config.train.mode)?;
    let loss = compute_loss(&mut g, &pass, scene, &config.loss)?;
    Ok(g.value(loss.total).item())
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the training loss over `samples` random parameter
/// coordinates (the first two always hit the query logits and RPE tables).
pub fn end_to_end_grad_error(
    model: &Model,
    scene: &PreparedScene,
    config: &Config,
    samples: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let step = scene_step(model, scene, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    let mut coords = vec![(model.query_logits(), 0), (model.rpe_table(), 0)];
    coords.truncate(samples);
    while coords.len() < samples {
        let id = ids[rng.gen_range(0..ids.len())];
        coords.push((id, rng.gen_range(0..model.params.get(id).len())));
    }
    let h = DEFAULT_STEP;
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (id, k) in coords {
        let analytic = step.grads[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
        let x = model.params.get(id).data()[k];
        probe.params.get_mut(id).data_mut()[k] = x + h;
        let plus = loss_value(&probe, scene, config)?;
        probe.params.get_mut(id).data_mut()[k] = x - h;
        let minus = loss_value(&probe, scene, config)?;
        probe.params.get_mut(id).data_mut()[k] = x;
        worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub primitives: Vec<PrimitiveCheck>,
    pub end_to_end: f64,
    pub tokens: usize,
    pub samples: usize,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.primitives.iter().map(|p| p.max_rel_error).fold(self.end_to_end, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < GRAD_TOLERANCE
    }
}

/// Primitive suite plus the end-to-end check of `model` on a 50-token probe.
pub fn grad_check(model: &Model, config: &Config, seed: u64) -> Result<GradReport, TrainError> {
    let primitives = primitive_suite(seed).map_err(crate::decoder::DecoderError::from)?;
    let scene = probe_prepared(50, seed, config)?;
    let samples = 20;
    let end_to_end = end_to_end_grad_error(model, &scene, config, samples, seed)?;
    Ok(GradReport { primitives, end_to_end, tokens: scene.num_tokens(), samples })
}

/// First-layer recall at each of [`RECALL_THRESHOLDS`], pooled over scenes.
pub fn layer1_recall(model: &Model, scenes: &[PreparedScene], config: &Config, exec: Exec) -> Result<[f64; 2], TrainError> {
    let per_scene = exec.try_map(scenes.len(), |i| {
        let s = &scenes[i];
        let (first, _) = crate::train::predict(model, s, config)?;
        let mut covered = [0usize; 2];
        for (c, thr) in covered.iter_mut().zip(RECALL_THRESHOLDS) {
            *c = covered_instances(&first, &s.gt, thr)?;
        }
        Ok::<_, TrainError>(covered)
    })?;
    let total = scenes.iter().map(|s| s.gt.len()).sum::<usize>().max(1) as f64;
    Ok([0, 1].map(|k| per_scene.iter().map(|c| c[k]).sum::<usize>() as f64 / total))
}
