//! Mask-attention-free transformer decoder for 3D point-cloud instance
//! segmentation, with a mask-attention baseline, center-aware bipartite
//! matching, and the evaluation and training machinery around it.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod diagnose;
pub mod encode;
pub mod matchloss;
pub mod metrics;
pub mod numcore;
pub mod par;
pub mod scene;
pub mod train;
