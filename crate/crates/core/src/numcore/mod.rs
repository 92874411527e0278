//! Minimal reverse-mode numerical core: tensors, a differentiable tape,
//! losses, AdamW, and finite-difference gradient verification.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod nn;
pub mod selfcheck;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheck, DEFAULT_STEP};
pub use graph::{Graph, Var, BCE_CLAMP, DICE_SMOOTH};
pub use kernels::softmax_row;
pub use optim::{AdamW, AdamWConfig, PolySchedule};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
}

/// Kind selector for [`loss`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Bce,
    Dice,
    L1,
}

/// Convenience dispatch over the loss primitives for plain tensors.
///
/// `ce` reads class indices from `target` (one per row of `pred`) with unit
/// weights; the others compare `pred` against `target` elementwise.
pub fn loss(g: &mut Graph, pred: Var, target: &Tensor, kind: LossKind) -> Result<Var, NumError> {
    match kind {
        LossKind::Ce => {
            let targets: Vec<usize> = target.data().iter().map(|v| *v as usize).collect();
            let weights = vec![1.0; targets.len()];
            g.cross_entropy(pred, &targets, &weights)
        }
        LossKind::Bce => g.bce(pred, std::sync::Arc::new(target.clone())),
        LossKind::Dice => g.dice(pred, std::sync::Arc::new(target.clone())),
        LossKind::L1 => {
            let t = g.constant(target.clone())?;
            g.l1(pred, t)
        }
    }
}
