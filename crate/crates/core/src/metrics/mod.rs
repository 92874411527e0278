//! Inference-time instance extraction and evaluation.

mod ap;

pub use ap::{average_precision, instance_ap};

use serde::Serialize;
use thiserror::Error;

use crate::decoder::LayerPrediction;
use crate::numcore::softmax_row;
use crate::scene::{GroundTruth, Point};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty ground truth: {0}")]
    EmptyGroundTruth(String),
    #[error("empty mask for instance {0}")]
    EmptyMask(usize),
    #[error("unknown query {query} (model has {queries})")]
    UnknownQuery { query: usize, queries: usize },
}

/// Foreground cut applied to mask probabilities.
pub const MASK_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 100;
/// Scaled from 100 points on full-size scans to synthetic token counts.
pub const DEFAULT_MIN_TOKENS: usize = 10;
/// IoU thresholds 0.50:0.95 in steps of 0.05.
pub const MAP_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const RECALL_THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub mask: Vec<bool>,
    pub class: usize,
    pub score: f64,
    pub center: Point,
    /// Query that produced this instance.
    pub query: usize,
}

impl InstanceResult {
    pub fn size(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn foreground(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p >= MASK_THRESHOLD).collect()
}

/// Turns one decoder layer's outputs into scored instances.
///
/// Score is the best non-background class probability times the mean mask
/// probability over the query's foreground. Queries with an empty foreground
/// produce nothing; the `top_k` best are kept, then those under `min_tokens`
/// are dropped.
pub fn extract_instances(pred: &LayerPrediction, top_k: usize, min_tokens: usize) -> Vec<InstanceResult> {
    let n = pred.mask_probs.rows();
    let classes = pred.class_logits.cols().saturating_sub(1);
    let mut out = Vec::new();
    for q in 0..n {
        let probs = pred.mask_probs.row(q);
        let mask = foreground(probs);
        let (sum, count) = probs
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, c), (p, _)| (s + p, c + 1));
        if count == 0 || classes == 0 {
            continue;
        }
        let cls = softmax_row(pred.class_logits.row(q));
        let (class, best) = cls[..classes]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
        let score = (best * sum / count as f64).clamp(0.0, 1.0);
        out.push(InstanceResult { mask, class, score, center: pred.centers[q], query: q });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(top_k);
    out.retain(|r| r.size() >= min_tokens);
    out
}

pub(crate) fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Number of GT instances covered by some thresholded query mask.
pub fn covered_instances(pred: &LayerPrediction, gt: &GroundTruth, iou_thr: f64) -> Result<usize, MetricsError> {
    if pred.mask_probs.cols() != gt.num_tokens {
        return Err(MetricsError::Shape(format!(
            "prediction over {} tokens, GT over {}",
            pred.mask_probs.cols(),
            gt.num_tokens
        )));
    }
    let masks: Vec<Vec<bool>> = (0..pred.mask_probs.rows()).map(|q| foreground(pred.mask_probs.row(q))).collect();
    Ok(gt
        .instances
        .iter()
        .filter(|g| masks.iter().any(|m| mask_iou(m, &g.mask) >= iou_thr))
        .count())
}

/// Class-agnostic fraction of GT instances overlapped by at least one query
/// mask with IoU `≥ iou_thr`.
pub fn initial_recall(layer1: &LayerPrediction, gt: &GroundTruth, iou_thr: f64) -> Result<f64, MetricsError> {
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth("recall needs at least one instance".into()));
    }
    Ok(covered_instances(layer1, gt, iou_thr)? as f64 / gt.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn of_mask(mask: &[bool], positions: &[Point]) -> Option<Self> {
        let mut it = mask.iter().zip(positions).filter(|(&m, _)| m).map(|(_, p)| *p);
        let first = it.next()?;
        Some(it.fold(Aabb { min: first, max: first }, |b, p| Aabb {
            min: [b.min[0].min(p[0]), b.min[1].min(p[1]), b.min[2].min(p[2])],
            max: [b.max[0].max(p[0]), b.max[1].max(p[1]), b.max[2].max(p[2])],
        }))
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).max(0.0)).product()
    }

    /// Volume IoU. Two coincident degenerate boxes count as a full overlap.
    pub fn iou(&self, other: &Aabb) -> f64 {
        let inter: f64 = (0..3)
            .map(|a| (self.max[a].min(other.max[a]) - self.min[a].max(other.min[a])).max(0.0))
            .product();
        let union = self.volume() + other.volume() - inter;
        if union > 0.0 {
            inter / union
        } else if self == other {
            1.0
        } else {
            0.0
        }
    }
}

/// Componentwise extent of the token positions under each instance mask.
pub fn masks_to_boxes(results: &[InstanceResult], positions: &[Point]) -> Result<Vec<Aabb>, MetricsError> {
    results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.mask.len() != positions.len() {
                return Err(MetricsError::Shape(format!("mask over {} tokens, {} positions", r.mask.len(), positions.len())));
            }
            Aabb::of_mask(&r.mask, positions).ok_or(MetricsError::EmptyMask(i))
        })
        .collect()
}

/// Final-layer assignment recorded at one logging step.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchRecord {
    pub step: u64,
    pub scene: usize,
    /// Query matched to each GT instance.
    pub query_of_gt: Vec<usize>,
    pub gt_centers: Vec<Point>,
}

/// Centers of every GT matched to `query`, in record order.
pub fn matching_trace(records: &[MatchRecord], queries: usize, query: usize) -> Result<Vec<(u64, Point)>, MetricsError> {
    if query >= queries {
        return Err(MetricsError::UnknownQuery { query, queries });
    }
    Ok(records
        .iter()
        .flat_map(|r| {
            r.query_of_gt
                .iter()
                .zip(&r.gt_centers)
                .filter(move |(&q, _)| q == query)
                .map(move |(_, &c)| (r.step, c))
        })
        .collect())
}

/// Per-scene inputs to [`evaluate`].
pub struct SceneEval<'a> {
    pub results: &'a [InstanceResult],
    pub gt: &'a GroundTruth,
    pub positions: &'a [Point],
    /// First decoder layer output, for initial-mask recall.
    pub layer1: Option<&'a LayerPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAp {
    pub class: usize,
    pub gt_count: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap25: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub map: f64,
    pub map50: f64,
    pub map25: f64,
    pub recall25: Option<f64>,
    pub recall50: Option<f64>,
    pub box_map50: f64,
    pub box_map25: f64,
    pub per_class: Vec<ClassAp>,
}

impl EvalReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        let mut s = format!(
            "scenes: {}\nmAP: {:.6}\nmAP50: {:.6}\nmAP25: {:.6}\nrecall25_layer1: {}\nrecall50_layer1: {}\nbox_mAP50: {:.6}\nbox_mAP25: {:.6}\n",
            self.scenes,
            self.map,
            self.map50,
            self.map25,
            opt(self.recall25),
            opt(self.recall50),
            self.box_map50,
            self.box_map25
        );
        for c in &self.per_class {
            s.push_str(&format!(
                "class_{}: gt {} ap {} ap50 {} ap25 {}\n",
                c.class,
                c.gt_count,
                opt(c.ap),
                opt(c.ap50),
                opt(c.ap25)
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mask AP, box AP and first-layer recall pooled over scenes.
pub fn evaluate(scenes: &[SceneEval<'_>], num_classes: usize) -> Result<EvalReport, MetricsError> {
    let gt_total: usize = scenes.iter().map(|s| s.gt.len()).sum();
    if gt_total == 0 {
        return Err(MetricsError::EmptyGroundTruth("evaluation set has no instances".into()));
    }
    let pairs: Vec<(&[InstanceResult], &GroundTruth)> = scenes.iter().map(|s| (s.results, s.gt)).collect();
    for (res, gt) in &pairs {
        if let Some(r) = res.iter().find(|r| r.mask.len() != gt.num_tokens) {
            return Err(MetricsError::Shape(format!("result mask over {} tokens, GT over {}", r.mask.len(), gt.num_tokens)));
        }
    }
    let mask_overlap = |s: usize, r: &InstanceResult, k: usize| mask_iou(&r.mask, &scenes[s].gt.instances[k].mask);
    let per_threshold = |t: f64| ap::class_aps(&pairs, num_classes, t, &mask_overlap);
    let grid: Vec<Vec<Option<f64>>> = MAP_THRESHOLDS.iter().map(|&t| per_threshold(t)).collect();
    let at25 = per_threshold(0.25);

    let per_class: Vec<ClassAp> = (0..num_classes)
        .map(|c| {
            let column: Vec<Option<f64>> = grid.iter().map(|row| row[c]).collect();
            ClassAp {
                class: c,
                gt_count: scenes.iter().map(|s| s.gt.instances.iter().filter(|g| g.class == c).count()).sum(),
                ap: ap::mean_defined(&column),
                ap50: grid[0][c],
                ap25: at25[c],
            }
        })
        .collect();
    let class_mean = |row: &[Option<f64>]| ap::mean_defined(row).unwrap_or(0.0);
    let map = grid.iter().map(|row| class_mean(row)).sum::<f64>() / grid.len() as f64;

    let boxes = scenes
        .iter()
        .map(|s| {
            let pred = masks_to_boxes(s.results, s.positions)?;
            let gt = s
                .gt
                .instances
                .iter()
                .enumerate()
                .map(|(k, g)| Aabb::of_mask(&g.mask, s.positions).ok_or(MetricsError::EmptyMask(k)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((pred, gt))
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let index_of = |s: usize, r: &InstanceResult| {
        scenes[s].results.iter().position(|x| std::ptr::eq(x, r)).expect("result belongs to its scene")
    };
    let box_overlap = |s: usize, r: &InstanceResult, k: usize| boxes[s].0[index_of(s, r)].iou(&boxes[s].1[k]);
    let box_map = |t: f64| class_mean(&ap::class_aps(&pairs, num_classes, t, &box_overlap));

    let recall = |thr: f64| -> Result<Option<f64>, MetricsError> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for s in scenes {
            let Some(l1) = s.layer1 else { return Ok(None) };
            hit += covered_instances(l1, s.gt, thr)?;
            total += s.gt.len();
        }
        Ok(Some(hit as f64 / total as f64))
    };

    Ok(EvalReport {
        scenes: scenes.len(),
        map,
        map50: class_mean(&grid[0]),
        map25: class_mean(&at25),
        recall25: recall(RECALL_THRESHOLDS[0])?,
        recall50: recall(RECALL_THRESHOLDS[1])?,
        box_map50: box_map(0.5),
        box_map25: box_map(0.25),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use crate::scene::GtInstance;

    fn pred(masks: &[&[f64]], logits: &[&[f64]]) -> LayerPrediction {
        LayerPrediction {
            centers: vec![[0.0; 3]; masks.len()],
            class_logits: Tensor::from_rows(&logits.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
            mask_probs: Tensor::from_rows(&masks.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
        }
    }

    fn gt(masks: &[&[bool]], classes: &[usize]) -> GroundTruth {
        GroundTruth {
            instances: masks
                .iter()
                .zip(classes)
                .map(|(m, &c)| GtInstance { mask: m.to_vec(), class: c, center: [0.0; 3] })
                .collect(),
            num_tokens: masks[0].len(),
        }
    }

    #[test]
    fn no_foreground_gives_no_instances() {
        let p = pred(&[&[0.1, 0.4, 0.49]], &[&[1.0, 0.0]]);
        assert!(extract_instances(&p, 10, 0).is_empty());
    }

    #[test]
    fn identical_queries_keep_query_order() {
        let p = pred(&[&[0.9, 0.8], &[0.9, 0.8]], &[&[1.0, 0.0], &[1.0, 0.0]]);
        let r = extract_instances(&p, 10, 0);
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].score, r[1].score);
        assert_eq!((r[0].query, r[1].query), (0, 1));
        assert_eq!(extract_instances(&p, 1, 0).len(), 1);
    }

    #[test]
    fn score_is_class_probability_times_mean_foreground() {
        let p = pred(&[&[0.9, 0.7, 0.2]], &[&[0.0, 0.0, 0.0]]);
        let r = extract_instances(&p, 10, 0);
        assert!((r[0].score - (1.0 / 3.0) * 0.8).abs() < 1e-12);
        assert_eq!(r[0].mask, vec![true, true, false]);
        assert!(extract_instances(&p, 10, 3).is_empty());
    }

    #[test]
    fn recall_counts_covered_instances() {
        let g = gt(&[&[true, true, false, false], &[false, false, true, true]], &[0, 0]);
        let p = pred(&[&[0.9, 0.9, 0.0, 0.0], &[0.0; 4]], &[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(initial_recall(&p, &g, 0.5).unwrap(), 0.5);
        let empty = pred(&[&[0.0; 4]], &[&[0.0, 0.0]]);
        assert_eq!(initial_recall(&empty, &g, 0.25).unwrap(), 0.0);
        let none = GroundTruth { instances: vec![], num_tokens: 4 };
        assert!(initial_recall(&p, &none, 0.5).is_err());
    }

    #[test]
    fn boxes_span_masked_positions() {
        let r = InstanceResult { mask: vec![true, false, true], class: 0, score: 1.0, center: [0.0; 3], query: 0 };
        let pos = [[0.0, 0.0, 0.0], [9.0, 9.0, 9.0], [1.0, 2.0, 3.0]];
        let b = masks_to_boxes(std::slice::from_ref(&r), &pos).unwrap();
        assert_eq!(b[0], Aabb { min: [0.0; 3], max: [1.0, 2.0, 3.0] });
        let empty = InstanceResult { mask: vec![false; 3], ..r };
        assert!(masks_to_boxes(&[empty], &pos).is_err());
    }

    #[test]
    fn degenerate_box_iou() {
        let a = Aabb { min: [1.0; 3], max: [1.0; 3] };
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Aabb { min: [0.0; 3], max: [0.0; 3] }), 0.0);
    }

    #[test]
    fn trace_collects_matches_of_one_query() {
        let recs = vec![
            MatchRecord { step: 1, scene: 0, query_of_gt: vec![7, 2], gt_centers: vec![[1.0; 3], [2.0; 3]] },
            MatchRecord { step: 2, scene: 1, query_of_gt: vec![3], gt_centers: vec![[3.0; 3]] },
            MatchRecord { step: 3, scene: 0, query_of_gt: vec![2, 7], gt_centers: vec![[1.0; 3], [2.0; 3]] },
        ];
        assert_eq!(matching_trace(&recs, 10, 7).unwrap(), vec![(1, [1.0; 3]), (3, [2.0; 3])]);
        assert!(matching_trace(&recs, 10, 5).unwrap().is_empty());
        assert!(matching_trace(&recs, 10, 10).is_err());
    }

    #[test]
    fn report_on_perfect_results() {
        let g = gt(&[&[true, true, false, false], &[false, false, true, true]], &[0, 1]);
        let res: Vec<InstanceResult> = g
            .instances
            .iter()
            .enumerate()
            .map(|(k, i)| InstanceResult { mask: i.mask.clone(), class: i.class, score: 0.9, center: [0.0; 3], query: k })
            .collect();
        let pos = [[0.0; 3], [1.0, 1.0, 1.0], [2.0; 3], [3.0; 3]];
        let rep = evaluate(&[SceneEval { results: &res, gt: &g, positions: &pos, layer1: None }], 3).unwrap();
        assert_eq!((rep.map, rep.map50, rep.map25, rep.box_map50), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(rep.per_class[2].ap, None);
        assert!(rep.to_text().contains("mAP50: 1.000000"));
        assert!(rep.to_json().contains("\"map25\": 1.0"));
    }
}
