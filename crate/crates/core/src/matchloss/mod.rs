//! Center-aware bipartite matching and the deep-supervised set loss.

mod hungarian;

use std::sync::Arc;

pub use hungarian::{hungarian, Assignment};

use crate::data::PreparedScene;
use crate::decoder::{ForwardPass, LayerPrediction};
use crate::numcore::{Graph, NumError, Tensor, Var, BCE_CLAMP, DICE_SMOOTH};
use crate::scene::{GroundTruth, SceneBounds};

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("{instances} instances exceed {queries} queries")]
    Capacity { instances: usize, queries: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// `λ = (cls, bce, dice, center)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub center: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 0.5, bce: 1.0, dice: 1.0, center: 0.5 }
    }
}

impl LossWeights {
    pub fn scaled(self, s: f64) -> Self {
        Self { cls: self.cls * s, bce: self.bce * s, dice: self.dice * s, center: self.center * s }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub no_object_weight: f64,
    /// Include the center term in the matching cost.
    pub center_match: bool,
    /// Include the center term in the loss.
    pub center_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), no_object_weight: 0.1, center_match: true, center_loss: true }
    }
}

/// Matching costs, `n × m`, with their weighted sum in `total`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub total: Tensor,
    pub cls: Tensor,
    pub bce: Tensor,
    pub dice: Tensor,
    pub center: Tensor,
    pub weights: LossWeights,
}

/// Pairwise costs between every query and every GT instance.
///
/// Class cost is `−log p_k(class)`, mask costs use soft probabilities against
/// binary GT masks (mean-reduced), center cost is the mean absolute difference
/// in normalized scene coordinates.
pub fn cost_matrix(
    pred: &LayerPrediction,
    gt: &GroundTruth,
    bounds: &SceneBounds,
    weights: &LossWeights,
) -> Result<CostMatrix, MatchError> {
    let n = pred.mask_probs.rows();
    let nt = pred.mask_probs.cols();
    let m = gt.len();
    if m > n {
        return Err(MatchError::Capacity { instances: m, queries: n });
    }
    if nt != gt.num_tokens || pred.class_logits.rows() != n || pred.centers.len() != n {
        return Err(MatchError::Shape(format!(
            "predictions for {n} queries × {nt} tokens against GT over {} tokens",
            gt.num_tokens
        )));
    }
    let k1 = pred.class_logits.cols();
    if let Some(bad) = gt.instances.iter().find(|g| g.class + 1 >= k1) {
        return Err(MatchError::Shape(format!("GT class {} outside {} logits", bad.class, k1)));
    }
    let members: Vec<Vec<usize>> = gt
        .instances
        .iter()
        .map(|g| (0..nt).filter(|&j| g.mask[j]).collect())
        .collect();
    let gt_centers: Vec<[f64; 3]> = gt.instances.iter().map(|g| bounds.normalize(g.center)).collect();

    let mut cls = Vec::with_capacity(n * m);
    let mut bce = Vec::with_capacity(n * m);
    let mut dice = Vec::with_capacity(n * m);
    let mut center = Vec::with_capacity(n * m);
    for i in 0..n {
        let logits = pred.class_logits.row(i);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let p = pred.mask_probs.row(i);
        let (mut sum_p, mut sum_log1m) = (0.0, 0.0);
        let mut logit_gap = Vec::with_capacity(nt);
        for &v in p {
            let c = v.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            sum_p += v;
            sum_log1m += (1.0 - c).ln();
            logit_gap.push(c.ln() - (1.0 - c).ln());
        }
        let qc = bounds.normalize(pred.centers[i]);
        for (k, g) in gt.instances.iter().enumerate() {
            cls.push(lse - logits[g.class]);
            let (mut inter, mut gap) = (0.0, 0.0);
            for &j in &members[k] {
                inter += p[j];
                gap += logit_gap[j];
            }
            bce.push(-(gap + sum_log1m) / nt as f64);
            let size = members[k].len() as f64;
            dice.push(1.0 - (2.0 * inter + DICE_SMOOTH) / (sum_p + size + DICE_SMOOTH));
            center.push((0..3).map(|a| (qc[a] - gt_centers[k][a]).abs()).sum::<f64>() / 3.0);
        }
    }
    let total: Vec<f64> = (0..n * m)
        .map(|e| weights.cls * cls[e] + weights.bce * bce[e] + weights.dice * dice[e] + weights.center * center[e])
        .collect();
    let mk = |v: Vec<f64>| Tensor::new(vec![n, m], v).expect("n×m");
    let out = CostMatrix { total: mk(total), cls: mk(cls), bce: mk(bce), dice: mk(dice), center: mk(center), weights: *weights };
    if !out.total.is_finite() {
        return Err(MatchError::Domain("non-finite matching cost".into()));
    }
    Ok(out)
}

/// Unweighted loss terms of one layer and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub center: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn mean(terms: &[LossTerms]) -> LossTerms {
        let k = terms.len().max(1) as f64;
        let mut m = LossTerms::default();
        for t in terms {
            m.cls += t.cls / k;
            m.bce += t.bce / k;
            m.dice += t.dice / k;
            m.center += t.center / k;
            m.total += t.total / k;
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Mean over layers of each layer's weighted total.
    pub total: Var,
    pub per_layer: Vec<LossTerms>,
    pub assignments: Vec<Assignment>,
}

impl LossOutput {
    pub fn mean_terms(&self) -> LossTerms {
        LossTerms::mean(&self.per_layer)
    }
}

/// Deep-supervised loss: every layer is matched independently and supervised
/// with class/mask/center terms on matched queries and the down-weighted
/// no-object class elsewhere.
pub fn compute_loss(
    g: &mut Graph,
    pass: &ForwardPass,
    scene: &PreparedScene,
    cfg: &LossConfig,
) -> Result<LossOutput, MatchError> {
    let gt = &scene.gt;
    let bounds = &scene.tokens.bounds;
    let w = cfg.weights;
    let match_weights = LossWeights { center: if cfg.center_match { w.center } else { 0.0 }, ..w };
    let mut totals = Vec::with_capacity(pass.layers.len());
    let mut per_layer = Vec::with_capacity(pass.layers.len());
    let mut assignments = Vec::with_capacity(pass.layers.len());
    for (t, out) in pass.layers.iter().enumerate() {
        let pred = pass.prediction(g, t);
        let n = pred.mask_probs.rows();
        let no_object = pred.class_logits.cols() - 1;
        let cost = cost_matrix(&pred, gt, bounds, &match_weights)?;
        let assign = hungarian(&cost.total)?;

        let mut targets = vec![no_object; n];
        let mut cw = vec![cfg.no_object_weight; n];
        for (k, &q) in assign.query_of_gt.iter().enumerate() {
            targets[q] = gt.instances[k].class;
            cw[q] = 1.0;
        }
        let ce = g.cross_entropy(out.class_logits, &targets, &cw)?;
        let mut total = g.scale(ce, w.cls)?;
        let mut terms = LossTerms { cls: g.value(ce).item(), ..LossTerms::default() };
        if !assign.is_empty() {
            let sel = &assign.query_of_gt;
            let masks = g.gather_rows(out.mask_probs, sel)?;
            let bce = g.bce(masks, Arc::clone(&scene.gt_masks))?;
            let dice = g.dice(masks, Arc::clone(&scene.gt_masks))?;
            let centers = g.gather_rows(out.centers_norm, sel)?;
            let target = g.constant(scene.gt_centers_norm.clone())?;
            let l1 = g.l1(centers, target)?;
            terms.bce = g.value(bce).item();
            terms.dice = g.value(dice).item();
            terms.center = g.value(l1).item();
            let mut parts = vec![(bce, w.bce), (dice, w.dice)];
            if cfg.center_loss {
                parts.push((l1, w.center));
            }
            for (v, lam) in parts {
                let s = g.scale(v, lam)?;
                total = g.add(total, s)?;
            }
        }
        terms.total = g.value(total).item();
        totals.push(total);
        per_layer.push(terms);
        assignments.push(assign);
    }
    let sum = g.concat_rows(&totals)?;
    let total = g.mean(sum)?;
    Ok(LossOutput { total, per_layer, assignments })
}
