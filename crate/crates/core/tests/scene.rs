use maft_core::scene::{
    crop_to_limit, generate_scene, parse_scene, scene_bounds, scene_to_string, voxelize, GenParams, Scene,
};
use proptest::prelude::*;

/// Snaps coordinates to a 2^-10 m grid so translations by multiples of
/// 2^-4 m are exact in floating point.
fn dyadic(scene: &Scene) -> Scene {
    let mut s = scene.clone();
    for p in &mut s.points {
        *p = p.map(|v| (v * 1024.0).round() / 1024.0);
    }
    s
}

fn small_params() -> GenParams {
    GenParams { extent: [4.0, 4.0, 2.0], min_instances: 2, max_instances: 4, density: 120.0, min_gap: 0.2, ..GenParams::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn translation_moves_geometry_and_keeps_labels(seed in 0u64..1000, k in prop::array::uniform3(-64i32..64)) {
        let scene = dyadic(&generate_scene(seed, &small_params()).unwrap());
        let v = k.map(|k| k as f64 / 16.0);
        let moved = scene.translated(v);
        let (a, ga) = voxelize(&scene, 0.05).unwrap();
        let (b, gb) = voxelize(&moved, 0.05).unwrap();

        let (ba, bb) = (scene_bounds(&scene).unwrap(), scene_bounds(&moved).unwrap());
        for (ax, d) in v.iter().enumerate() {
            prop_assert_eq!(bb.p_min[ax], ba.p_min[ax] + d);
            prop_assert_eq!(bb.p_max[ax], ba.p_max[ax] + d);
        }
        prop_assert_eq!(a.len(), b.len());
        prop_assert_eq!(&a.token_to_points, &b.token_to_points);
        prop_assert_eq!(&a.sem_label, &b.sem_label);
        prop_assert_eq!(&a.inst_label, &b.inst_label);
        for (p, q) in a.positions.iter().zip(&b.positions) {
            for ((q, p), d) in q.iter().zip(p).zip(&v) {
                prop_assert!((q - p - d).abs() < 1e-12);
            }
        }
        prop_assert_eq!(ga.instances.len(), gb.instances.len());
        for (x, y) in ga.instances.iter().zip(&gb.instances) {
            prop_assert_eq!(&x.mask, &y.mask);
            prop_assert_eq!(x.class, y.class);
            for ((b, a), d) in y.center.iter().zip(&x.center).zip(&v) {
                prop_assert!((b - a - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_seed(seed in 0u64..10_000) {
        let params = small_params();
        let a = generate_scene(seed, &params).unwrap();
        let b = generate_scene(seed, &params).unwrap();
        prop_assert_eq!(scene_to_string(&a), scene_to_string(&b));
        prop_assert!(a.validate().is_ok());
        let n = a.num_instances();
        prop_assert!((params.min_instances..=params.max_instances).contains(&n));
    }

    #[test]
    fn voxelization_conserves_points(seed in 0u64..1000, voxel in 0.02f64..0.5) {
        let scene = generate_scene(seed, &small_params()).unwrap();
        let (tokens, gt) = voxelize(&scene, voxel).unwrap();
        let mut seen: Vec<usize> = tokens.token_to_points.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..scene.len()).collect::<Vec<_>>());
        prop_assert_eq!(gt.num_tokens, tokens.len());
    }

    #[test]
    fn crop_keeps_a_valid_scene_under_the_limit(seed in 0u64..1000, limit in 50usize..2000) {
        let scene = generate_scene(seed, &small_params()).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let cropped = crop_to_limit(&scene, limit, &mut rng);
        prop_assert!(cropped.len() <= limit);
        prop_assert!(cropped.validate().is_ok());
    }
}

#[test]
fn generated_scenes_round_trip_through_text() {
    for seed in 0..5 {
        let scene = generate_scene(seed, &GenParams::default()).unwrap();
        let back = parse_scene(&scene_to_string(&scene)).unwrap();
        assert_eq!(back, scene);
    }
}

#[test]
fn default_scenes_match_the_desk_scale_targets() {
    let params = GenParams::default();
    let mut tokens = 0;
    for seed in 0..10 {
        let scene = generate_scene(seed, &params).unwrap();
        let n = scene.num_instances();
        assert!((3..=8).contains(&n));
        tokens += voxelize(&scene, 0.05).unwrap().0.len();
    }
    let mean = tokens / 10;
    assert!((2000..=5000).contains(&mean), "mean tokens {mean}");
}
