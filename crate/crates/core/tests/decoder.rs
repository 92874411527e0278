mod common;

use common::{prepared, tiny_config, tiny_model, tiny_model_config};
use maft_core::decoder::{AttentionMode, Model, ModelConfig};
use maft_core::matchloss::compute_loss;
use maft_core::numcore::{relative_error, Graph, Tensor};
use maft_core::train::scene_step;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn predictions(model: &Model, scene: &maft_core::data::PreparedScene, mode: AttentionMode) -> Vec<maft_core::decoder::LayerPrediction> {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &scene.tokens, &scene.knn, mode).unwrap();
    pass.predictions(&g)
}

#[test]
fn forward_is_deterministic() {
    let scene = prepared(60, 1);
    let model = tiny_model(3);
    for mode in AttentionMode::ALL {
        assert_eq!(predictions(&model, &scene, mode), predictions(&model, &scene, mode), "{mode}");
    }
}

#[test]
fn six_layers_of_well_formed_predictions() {
    let scene = prepared(60, 2);
    let model = tiny_model(4);
    for mode in AttentionMode::ALL {
        let preds = predictions(&model, &scene, mode);
        assert_eq!(preds.len(), 6);
        for p in &preds {
            assert_eq!(p.class_logits.shape(), &[8, 19]);
            assert_eq!(p.mask_probs.shape(), &[8, scene.num_tokens()]);
            assert!(p.mask_probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(p.centers.iter().flatten().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn full_size_model_yields_six_predictions_of_100_queries() {
    let scene = prepared(40, 3);
    let model = Model::new(ModelConfig { knn: 8, ..ModelConfig::default() }, 0).unwrap();
    let preds = predictions(&model, &scene, AttentionMode::Rpe);
    assert_eq!(preds.len(), 6);
    assert!(preds.iter().all(|p| p.class_logits.shape() == [100, 19]));
}

#[test]
fn zero_rpe_tables_match_no_positional_bias_exactly() {
    let scene = prepared(60, 5);
    let mut model = tiny_model(6);
    let id = model.rpe_table();
    let shape = model.params.get(id).shape().to_vec();
    model.params.set(id, Tensor::zeros(&shape)).unwrap();
    let rpe = predictions(&model, &scene, AttentionMode::Rpe);
    let none = predictions(&model, &scene, AttentionMode::None);
    for (a, b) in rpe.iter().zip(&none) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.mask_probs), bits(&b.mask_probs));
        assert_eq!(bits(&a.class_logits), bits(&b.class_logits));
        assert_eq!(a.centers, b.centers);
    }
}

#[test]
fn refinement_off_keeps_positions_constant() {
    let scene = prepared(60, 7);
    let mut model = Model::new(ModelConfig { refine: false, ..tiny_model_config() }, 8).unwrap();
    // Nonzero center offsets, so a frozen trace is not an artifact of initialization.
    let out = model.center_output().clone();
    let b = model.params.get(out.bias).clone();
    model.params.set(out.bias, Tensor::new(b.shape().to_vec(), vec![0.3; b.len()]).unwrap()).unwrap();
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &scene.tokens, &scene.knn, AttentionMode::Rpe).unwrap();
    assert_eq!(pass.trace.len(), 7);
    assert!(pass.trace.iter().all(|t| t == &pass.trace[0]));
}

#[test]
fn refinement_moves_positions_by_the_center_offset() {
    let scene = prepared(60, 7);
    let mut model = tiny_model(8);
    let out = model.center_output().clone();
    let b = model.params.get(out.bias).clone();
    model.params.set(out.bias, Tensor::new(b.shape().to_vec(), vec![0.1, -0.2, 0.05]).unwrap()).unwrap();
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &scene.tokens, &scene.knn, AttentionMode::Rpe).unwrap();
    let preds = pass.predictions(&g);
    for (t, p) in preds.iter().enumerate() {
        assert_eq!(p.centers, pass.trace[t + 1], "layer {t}");
        for (next, prev) in pass.trace[t + 1].iter().zip(&pass.trace[t]) {
            assert!((next[0] - prev[0] - 0.1).abs() < 1e-12);
            assert!((next[1] - prev[1] + 0.2).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_center_offset_at_initialization() {
    let scene = prepared(60, 9);
    let model = tiny_model(10);
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &scene.tokens, &scene.knn, AttentionMode::Rpe).unwrap();
    let preds = pass.predictions(&g);
    for p in &preds {
        assert_eq!(p.centers, pass.trace[0]);
    }
    // Initial positions follow the denormalized sigmoid of the query logits.
    let logits = model.params.get(model.query_logits());
    let b = scene.tokens.bounds;
    for (q, pos) in pass.trace[0].iter().enumerate() {
        for (a, &p) in pos.iter().enumerate() {
            let s = 1.0 / (1.0 + (-logits.at(q, a)).exp());
            assert!((p - (s * (b.p_max[a] - b.p_min[a]) + b.p_min[a])).abs() < 1e-12);
        }
    }
}

#[test]
fn token_permutation_permutes_mask_columns() {
    let scene = prepared(50, 11);
    let model = tiny_model(12);
    let n = scene.num_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let tokens = scene.tokens.permuted(&perm);
    let permuted = maft_core::data::PreparedScene::new(tokens, scene.gt.clone(), 8, maft_core::par::Exec::Sequential).unwrap();
    for mode in AttentionMode::ALL {
        let a = predictions(&model, &scene, mode);
        let b = predictions(&model, &permuted, mode);
        for (pa, pb) in a.iter().zip(&b) {
            for q in 0..8 {
                for (j, &src) in perm.iter().enumerate() {
                    assert!((pb.mask_probs.at(q, j) - pa.mask_probs.at(q, src)).abs() < 1e-9, "{mode}");
                }
                for c in 0..19 {
                    assert!((pb.class_logits.at(q, c) - pa.class_logits.at(q, c)).abs() < 1e-9, "{mode}");
                }
                for k in 0..3 {
                    assert!((pb.centers[q][k] - pa.centers[q][k]).abs() < 1e-9, "{mode}");
                }
            }
        }
    }
}

fn loss_value(model: &Model, scene: &maft_core::data::PreparedScene, config: &maft_core::config::Config) -> f64 {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &scene.tokens, &scene.knn, config.train.mode).unwrap();
    let loss = compute_loss(&mut g, &pass, scene, &config.loss).unwrap();
    g.value(loss.total).item()
}

/// Central differences on 20 sampled coordinates against reverse mode.
fn end_to_end_grad_error(mode: AttentionMode, seed: u64) -> f64 {
    let scene = prepared(50, seed);
    assert_eq!(scene.num_tokens(), 50);
    let mut config = tiny_config();
    config.train.mode = mode;
    let model = tiny_model(seed + 1);
    let step = scene_step(&model, &scene, &config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let ids: Vec<_> = model.params.ids().collect();
    let mut samples = vec![(model.query_logits(), 0), (model.rpe_table(), 0)];
    while samples.len() < 20 {
        let id = ids[rng.gen_range(0..ids.len())];
        samples.push((id, rng.gen_range(0..model.params.get(id).len())));
    }
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (id, k) in samples {
        let analytic = step.grads[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params.get_mut(id).data_mut()[k] += delta;
            loss_value(&m, &scene, &config)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for mode in AttentionMode::ALL {
        let err = end_to_end_grad_error(mode, 20);
        eprintln!("{mode}: max relative error {err:.3e}");
        assert!(err < 1e-3, "{mode}: {err}");
    }
}

#[test]
fn mask_attention_restricts_later_layers() {
    let scene = prepared(60, 14);
    let mut model = tiny_model(15);
    let masked = predictions(&model, &scene, AttentionMode::MaskAttention);
    let plain = predictions(&model, &scene, AttentionMode::None);
    // Q^c_0 = 0 makes the initial mask all foreground, and a fresh mask head
    // keeps every later mask all foreground too.
    assert_eq!(masked, plain);

    let id = model.params.id("head.mask.1.weight").unwrap();
    let shape = model.params.get(id).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let w: Vec<f64> = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-3.0..3.0)).collect();
    model.params.set(id, Tensor::new(shape, w).unwrap()).unwrap();
    let masked = predictions(&model, &scene, AttentionMode::MaskAttention);
    let plain = predictions(&model, &scene, AttentionMode::None);
    let partial = masked[0].mask_probs.data().iter().any(|&p| p < 0.5);
    assert!(partial, "perturbed head still selects every token");
    assert_eq!(masked[0], plain[0]);
    assert!(masked[1..].iter().zip(&plain[1..]).all(|(a, b)| a != b));
}
