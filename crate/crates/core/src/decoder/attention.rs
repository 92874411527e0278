use rand::Rng;

use crate::numcore::nn::Linear;
use crate::numcore::{Graph, NumError, ParamStore, Var};

/// Per-head additive term for the scaled logits: `(graph, head, q_h, k_h) → n×N`.
pub(crate) type HeadBias<'a> = dyn FnMut(&mut Graph, usize, Var, Var) -> Result<Var, NumError> + 'a;

/// Query/key/value/output projections of one multi-head attention block.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
        }
    }

    /// `softmax(q_h k_hᵀ/√w + bias_h) v_h` per head, concatenated and projected.
    /// `keep` (row-major `n×N`) hard-masks logits.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        heads: usize,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        keep: Option<&[bool]>,
        mut bias: Option<&mut HeadBias<'_>>,
    ) -> Result<Var, NumError> {
        let q = self.q.forward(g, store, q_in)?;
        let k = self.k.forward(g, store, k_in)?;
        let v = self.v.forward(g, store, v_in)?;
        let d = g.value(q).cols();
        let w = d / heads;
        let scale = 1.0 / (w as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (c0, c1) = (h * w, (h + 1) * w);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, c0, c1)?, g.slice_cols(k, c0, c1)?, g.slice_cols(v, c0, c1)?)
            };
            let raw = g.matmul_nt(qh, kh)?;
            let mut logits = g.scale(raw, scale)?;
            if let Some(b) = bias.as_deref_mut() {
                let extra = b(g, h, qh, kh)?;
                logits = g.add(logits, extra)?;
            }
            let attn = match keep {
                Some(keep) => g.masked_softmax(logits, keep)?,
                None => g.softmax(logits, 1)?,
            };
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, store, cat)
    }
}
