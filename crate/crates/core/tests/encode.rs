use maft_core::encode::{fourier_ape, knn_indices, quantize_relative};
use maft_core::par::Exec;
use maft_core::scene::Point;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn point() -> impl Strategy<Value = Point> {
    prop::array::uniform3(-1.1f64..1.1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quantization_ignores_common_translation(q in point(), p in point(), k in prop::array::uniform3(-40i32..40)) {
        // Shifts on a 2^-3 grid keep every difference exact.
        let q = q.map(|v| (v * 4096.0).round() / 4096.0);
        let p = p.map(|v| (v * 4096.0).round() / 4096.0);
        let v = k.map(|k| k as f64 / 8.0);
        let shift = |x: Point| [x[0] + v[0], x[1] + v[1], x[2] + v[2]];
        let a = quantize_relative(&[q], &[p], 0.1, 48).unwrap();
        let b = quantize_relative(&[shift(q)], &[shift(p)], 0.1, 48).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn swapping_points_mirrors_the_index(q in point(), p in point()) {
        let fwd = quantize_relative(&[q], &[p], 0.1, 48).unwrap();
        let back = quantize_relative(&[p], &[q], 0.1, 48).unwrap();
        for a in 0..3 {
            let r = (q[a] - p[a]) / 0.1;
            if r.fract() != 0.0 {
                prop_assert_eq!(back[a], 47 - fwd[a]);
            }
        }
    }

    #[test]
    fn indices_stay_in_the_table(q in prop::array::uniform3(-50.0f64..50.0), p in point(), len in (1usize..40).prop_map(|h| 2 * h)) {
        let idx = quantize_relative(&[q], &[p], 0.1, len).unwrap();
        prop_assert!(idx.iter().all(|&i| (i as usize) < len));
    }

    #[test]
    fn ape_values_are_bounded(pos in prop::collection::vec(prop::array::uniform3(0.0f64..=1.0), 1..20), d in 6usize..64) {
        let ape = fourier_ape(&pos, d, 10_000.0).unwrap();
        prop_assert_eq!(ape.shape(), &[pos.len(), d]);
        prop_assert!(ape.data().iter().all(|v| v.abs() <= 1.0));
    }
}

#[test]
fn ape_separates_neighbouring_grid_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.gen_range(0..=1000) as f64 / 1000.0);
    let mut pts: Vec<Point> = (0..600).map(|_| grid(&mut rng)).collect();
    // The closest pairs on the grid: one step along each axis.
    for i in 0..200 {
        let mut q = pts[i];
        let a = i % 3;
        q[a] = if q[a] < 1.0 { q[a] + 0.001 } else { q[a] - 0.001 };
        pts.push(q);
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    for d in [24, 32, 64] {
        let ape = fourier_ape(&pts, d, 10_000.0).unwrap();
        for i in 0..pts.len() {
            for j in 0..i {
                let dist: f64 = ape.row(i).iter().zip(ape.row(j)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(dist > 1e-9, "d {d}: {:?} and {:?} collide", pts[i], pts[j]);
            }
        }
    }
}

#[test]
fn knn_is_identical_under_both_executors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts: Vec<Point> = (0..700).map(|_| [rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..2.0)]).collect();
    for k in [1, 8, 16, 1000] {
        assert_eq!(knn_indices(&pts, k, Exec::Sequential).unwrap(), knn_indices(&pts, k, Exec::Parallel).unwrap());
    }
}
