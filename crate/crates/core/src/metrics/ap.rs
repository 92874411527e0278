use super::{mask_iou, InstanceResult, MetricsError};
use crate::scene::GroundTruth;

/// Area under the precision-recall curve with all-point interpolation.
///
/// `ranked` is the detection list in descending score order, `true` for a
/// true positive; `n_gt` is the number of positives.
pub fn average_precision(ranked: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (r, &hit) in ranked.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (r + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope, non-increasing from the right.
    for r in (0..precision.len().saturating_sub(1)).rev() {
        precision[r] = precision[r].max(precision[r + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in 0..ranked.len() {
        if recall[r] > prev {
            ap += (recall[r] - prev) * precision[r];
            prev = recall[r];
        }
    }
    ap
}

/// Greedy per-scene matching: results in score order each take the unmatched
/// GT of the same class with the highest overlap `≥ threshold`.
/// Returns `(score, hit)` per result of class `class`.
pub(crate) fn match_scene(
    results: &[InstanceResult],
    gt: &GroundTruth,
    class: usize,
    threshold: f64,
    overlap: &dyn Fn(&InstanceResult, usize) -> f64,
) -> Vec<(f64, bool)> {
    let mut taken = vec![false; gt.len()];
    let mut order: Vec<usize> = (0..results.len()).filter(|&r| results[r].class == class).collect();
    order.sort_by(|&a, &b| results[b].score.total_cmp(&results[a].score));
    order
        .into_iter()
        .map(|r| {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gt.instances.iter().enumerate() {
                if taken[k] || g.class != class {
                    continue;
                }
                let iou = overlap(&results[r], k);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            if let Some((k, _)) = best {
                taken[k] = true;
            }
            (results[r].score, best.is_some())
        })
        .collect()
}

/// Per-class AP at one threshold, pooled over scenes; `None` for classes
/// without GT instances.
pub(crate) fn class_aps(
    scenes: &[(&[InstanceResult], &GroundTruth)],
    num_classes: usize,
    threshold: f64,
    overlap: &dyn Fn(usize, &InstanceResult, usize) -> f64,
) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let n_gt: usize = scenes.iter().map(|(_, g)| g.instances.iter().filter(|i| i.class == c).count()).sum();
            if n_gt == 0 {
                return None;
            }
            let mut pooled: Vec<(f64, bool)> = Vec::new();
            for (s, (res, gt)) in scenes.iter().enumerate() {
                pooled.extend(match_scene(res, gt, c, threshold, &|r, k| overlap(s, r, k)));
            }
            // Stable: equal scores keep scene order, then within-scene rank.
            pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
            let ranked: Vec<bool> = pooled.into_iter().map(|(_, h)| h).collect();
            Some(average_precision(&ranked, n_gt))
        })
        .collect()
}

pub(crate) fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Class-mean mask AP at each threshold.
pub fn instance_ap(
    scenes: &[(&[InstanceResult], &GroundTruth)],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<Vec<Option<f64>>, MetricsError> {
    for (res, gt) in scenes {
        if let Some(r) = res.iter().find(|r| r.mask.len() != gt.num_tokens) {
            return Err(MetricsError::Shape(format!("result mask over {} tokens, GT over {}", r.mask.len(), gt.num_tokens)));
        }
    }
    let overlap = |s: usize, r: &InstanceResult, k: usize| mask_iou(&r.mask, &scenes[s].1.instances[k].mask);
    Ok(thresholds.iter().map(|&t| mean_defined(&class_aps(scenes, num_classes, t, &overlap))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking_is_one() {
        assert_eq!(average_precision(&[true, true, true], 3), 1.0);
    }

    #[test]
    fn duplicate_after_truth_keeps_full_ap() {
        assert_eq!(average_precision(&[true, false], 1), 1.0);
    }

    #[test]
    fn false_positive_first_halves_precision() {
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[], 2), 0.0);
        assert_eq!(average_precision(&[true], 2), 0.5);
    }
}
