use std::collections::BTreeMap;

use crate::numcore::Tensor;

use super::{Point, Scene, SceneBounds, SceneError};

/// Per-token raw feature width: centroid color plus normalized position.
pub const RAW_FEATURES: usize = 6;

/// Voxel-pooled scene. Tokens are ordered by voxel key.
#[derive(Clone, Debug)]
pub struct SceneTokens {
    pub positions: Vec<Point>,
    /// `N × 6`.
    pub features: Tensor,
    pub token_to_points: Vec<Vec<usize>>,
    pub sem_label: Vec<i32>,
    pub inst_label: Vec<i32>,
    pub bounds: SceneBounds,
}

impl SceneTokens {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Reorders tokens so that new token `i` is old token `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> SceneTokens {
        let c = self.features.cols();
        let mut feats = Vec::with_capacity(perm.len() * c);
        for &p in perm {
            feats.extend_from_slice(self.features.row(p));
        }
        SceneTokens {
            positions: perm.iter().map(|&p| self.positions[p]).collect(),
            features: Tensor::new(vec![perm.len(), c], feats).expect("row count"),
            token_to_points: perm.iter().map(|&p| self.token_to_points[p].clone()).collect(),
            sem_label: perm.iter().map(|&p| self.sem_label[p]).collect(),
            inst_label: perm.iter().map(|&p| self.inst_label[p]).collect(),
            bounds: self.bounds,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub mask: Vec<bool>,
    pub class: usize,
    pub center: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub instances: Vec<GtInstance>,
    pub num_tokens: usize,
}

impl GroundTruth {
    /// Builds instances from per-token instance ids; ids that own no token are skipped.
    pub fn from_token_labels(inst: &[i32], classes: &[usize], positions: &[Point]) -> Self {
        let n = inst.len();
        let mut instances = Vec::new();
        for (id, &class) in classes.iter().enumerate() {
            let mask: Vec<bool> = inst.iter().map(|&i| i == id as i32).collect();
            let members: Vec<usize> = (0..n).filter(|&j| mask[j]).collect();
            if members.is_empty() {
                continue;
            }
            let mut center = [0.0; 3];
            for &j in &members {
                for a in 0..3 {
                    center[a] += positions[j][a];
                }
            }
            let center = center.map(|c| c / members.len() as f64);
            instances.push(GtInstance { mask, class, center });
        }
        Self { instances, num_tokens: n }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// `m × N` binary matrix.
    pub fn mask_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * self.num_tokens);
        for inst in &self.instances {
            data.extend(inst.mask.iter().map(|&b| f64::from(u8::from(b))));
        }
        Tensor::new(vec![self.len(), self.num_tokens], data).expect("mask size")
    }

    pub fn classes(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.class).collect()
    }
}

/// Most frequent label; ties go to the smallest.
fn majority(labels: impl Iterator<Item = i32>) -> i32 {
    let mut v: Vec<i32> = labels.collect();
    v.sort_unstable();
    let (mut best, mut best_n) = (v[0], 0);
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        if j - i > best_n {
            best = v[i];
            best_n = j - i;
        }
        i = j;
    }
    best
}

/// Pools points into voxels of side `voxel_size`, with the grid anchored at
/// the scene's minimum corner.
pub fn voxelize(scene: &Scene, voxel_size: f64) -> Result<(SceneTokens, GroundTruth), SceneError> {
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(SceneError::Parameter(format!("voxel size must be positive, got {voxel_size}")));
    }
    let bounds = SceneBounds::of_points(&scene.points)?;
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in scene.points.iter().enumerate() {
        let key = [0, 1, 2].map(|a| ((p[a] - bounds.p_min[a]) / voxel_size).floor() as i64);
        cells.entry(key).or_default().push(i);
    }

    let n = cells.len();
    let mut positions = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * RAW_FEATURES);
    let mut sem = Vec::with_capacity(n);
    let mut inst = Vec::with_capacity(n);
    let mut token_to_points = Vec::with_capacity(n);
    for members in cells.into_values() {
        let k = members.len() as f64;
        let (mut pos, mut col) = ([0.0; 3], [0.0; 3]);
        for &i in &members {
            for a in 0..3 {
                pos[a] += scene.points[i][a];
                col[a] += scene.colors[i][a];
            }
        }
        let pos = pos.map(|v| v / k);
        let col = col.map(|v| (v / k).clamp(0.0, 1.0));
        feats.extend_from_slice(&col);
        feats.extend_from_slice(&bounds.normalize(pos));
        positions.push(pos);
        sem.push(majority(members.iter().map(|&i| scene.sem_label[i])));
        inst.push(majority(members.iter().map(|&i| scene.inst_label[i])));
        token_to_points.push(members);
    }
    let gt = GroundTruth::from_token_labels(&inst, &scene.instance_classes(), &positions);
    let tokens = SceneTokens {
        positions,
        features: Tensor::new(vec![n, RAW_FEATURES], feats).expect("feature size"),
        token_to_points,
        sem_label: sem,
        inst_label: inst,
        bounds,
    };
    Ok((tokens, gt))
}
