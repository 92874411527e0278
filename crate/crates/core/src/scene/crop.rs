use rand::Rng;

use super::Scene;

/// Shrinks a cubic window around a random labelled point, halving its side
/// until at most `max_points` remain. Instance ids are compacted afterwards.
pub fn crop_to_limit<R: Rng + ?Sized>(scene: &Scene, max_points: usize, rng: &mut R) -> Scene {
    let max_points = max_points.max(1);
    if scene.len() <= max_points {
        return scene.clone();
    }
    let labelled: Vec<usize> = (0..scene.len()).filter(|&i| scene.inst_label[i] >= 0).collect();
    let anchor = if labelled.is_empty() {
        rng.gen_range(0..scene.len())
    } else {
        labelled[rng.gen_range(0..labelled.len())]
    };
    let c = scene.points[anchor];
    let reach = |p: &[f64; 3]| (0..3).map(|a| (p[a] - c[a]).abs()).fold(0.0, f64::max);
    let mut half = scene.points.iter().map(reach).fold(0.0, f64::max);
    let mut keep: Vec<usize> = (0..scene.len()).collect();
    while keep.len() > max_points {
        if half == 0.0 {
            // Only coincident points are left; break the tie by index.
            keep.retain(|&i| i != anchor);
            keep.truncate(max_points - 1);
            keep.insert(keep.partition_point(|&i| i < anchor), anchor);
            break;
        }
        half = if half < f64::MIN_POSITIVE { 0.0 } else { half / 2.0 };
        keep.retain(|&i| reach(&scene.points[i]) <= half);
    }
    scene.subset(&keep)
}
