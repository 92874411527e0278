//! A scene voxelized and indexed once, ready for repeated forward passes.

use std::sync::Arc;

use crate::encode::{knn_indices, EncodeError};
use crate::numcore::Tensor;
use crate::par::Exec;
use crate::scene::{voxelize, GroundTruth, Scene, SceneError, SceneTokens};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub tokens: SceneTokens,
    pub gt: GroundTruth,
    pub knn: Arc<Vec<usize>>,
    /// `m × N` binary GT masks.
    pub gt_masks: Arc<Tensor>,
    /// `m × 3` GT centers in normalized scene coordinates.
    pub gt_centers_norm: Tensor,
}

impl PreparedScene {
    pub fn new(tokens: SceneTokens, gt: GroundTruth, knn: usize, exec: Exec) -> Result<Self, DataError> {
        let (idx, _) = knn_indices(&tokens.positions, knn, exec)?;
        let gt_masks = Arc::new(gt.mask_tensor());
        let centers: Vec<f64> = gt.instances.iter().flat_map(|g| tokens.bounds.normalize(g.center)).collect();
        let gt_centers_norm = Tensor::new(vec![gt.len(), 3], centers).expect("m×3");
        Ok(Self { tokens, gt, knn: Arc::new(idx), gt_masks, gt_centers_norm })
    }

    pub fn from_scene(scene: &Scene, voxel: f64, knn: usize, exec: Exec) -> Result<Self, DataError> {
        let (tokens, gt) = voxelize(scene, voxel)?;
        Self::new(tokens, gt, knn, exec)
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }
}
