//! Token features, Fourier absolute position encoding, and the contextual
//! relative position encoding used as a cross-attention bias.

mod ape;
mod backbone;
mod rpe;

pub use ape::fourier_ape;
pub use backbone::{knn_indices, Backbone, DEFAULT_KNN};
pub use rpe::{quantize_relative, rpe_bias, RpeTable};

use crate::numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("backbone needs at least one token")]
    NoTokens,
    #[error(transparent)]
    Num(#[from] NumError),
}
