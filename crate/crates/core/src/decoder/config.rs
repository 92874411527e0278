use std::fmt;
use std::str::FromStr;

use super::DecoderError;

/// Positional mechanism used inside cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Contextual relative position bias.
    Rpe,
    /// Hard mask from the previous layer's predicted masks.
    MaskAttention,
    /// Plain attention.
    None,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [AttentionMode::Rpe, AttentionMode::MaskAttention, AttentionMode::None];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Rpe => "rpe",
            AttentionMode::MaskAttention => "mask_attention",
            AttentionMode::None => "none",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected rpe, mask_attention or none)"))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub ffn: usize,
    pub queries: usize,
    /// Foreground classes; the classifier has one extra no-object output.
    pub num_classes: usize,
    pub knn: usize,
    pub rpe_quant: f64,
    pub rpe_len: usize,
    pub ape_temperature: f64,
    /// Fourier APE on keys and queries.
    pub ape: bool,
    /// Iterative position refinement between layers.
    pub refine: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 8,
            d: 256,
            ffn: 1024,
            queries: 100,
            num_classes: 18,
            knn: crate::encode::DEFAULT_KNN,
            rpe_quant: 0.1,
            rpe_len: 48,
            ape_temperature: 10_000.0,
            ape: true,
            refine: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: String| Err(DecoderError::Config(m));
        if self.layers == 0 || self.heads == 0 || self.d == 0 || self.ffn == 0 || self.queries == 0 {
            return bad("layers, heads, d, ffn and queries must be positive".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.num_classes == 0 || self.knn == 0 {
            return bad("class count and knn must be positive".into());
        }
        if !(self.rpe_quant.is_finite() && self.rpe_quant > 0.0) {
            return bad(format!("rpe quantization must be positive, got {}", self.rpe_quant));
        }
        if self.rpe_len < 2 || !self.rpe_len.is_multiple_of(2) || self.rpe_len > 256 {
            return bad(format!("rpe table length must be even and in [2, 256], got {}", self.rpe_len));
        }
        if !(self.ape_temperature.is_finite() && self.ape_temperature > 0.0) {
            return bad(format!("ape temperature must be positive, got {}", self.ape_temperature));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }
}
