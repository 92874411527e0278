//! Query decoder: learnable position and content queries, cross-attention
//! with interchangeable positional modes, self-attention, FFN, iterative
//! position refinement, and the center/class/mask heads.

mod attention;
mod config;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encode::{fourier_ape, quantize_relative, rpe_bias, Backbone, EncodeError, RpeTable};
use crate::numcore::nn::{LayerNorm, Linear, Mlp};
use crate::numcore::{Graph, NumError, ParamId, ParamStore, Tensor, Var};
use crate::scene::{Point, SceneBounds, SceneTokens, RAW_FEATURES};

use attention::{Attention, HeadBias};
pub use config::{AttentionMode, ModelConfig};

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("decoder layer {layer}: {source}")]
    Layer { layer: usize, source: NumError },
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Num(#[from] NumError),
}

fn at_layer(layer: usize) -> impl Fn(NumError) -> DecoderError {
    move |source| DecoderError::Layer { layer, source }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    cross: Attention,
    cross_norm: LayerNorm,
    selfa: Attention,
    self_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

/// Every parameter of the network plus the handles that address them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    backbone: Backbone,
    layers: Vec<DecoderLayer>,
    center_head: Mlp,
    class_head: Mlp,
    mask_head: Mlp,
    query_logits: ParamId,
    rpe: RpeTable,
}

/// Query state entering a decoder layer.
#[derive(Clone, Debug)]
pub struct QueryState {
    pub content: Var,
    /// Absolute positions `Q̂^p` in meters.
    pub absolute: Vec<Point>,
    /// Node carrying `absolute`; differentiable only for the initial queries.
    pub absolute_var: Var,
}

/// Encoded scene shared by every decoder layer.
#[derive(Clone, Debug)]
pub struct SceneContext {
    pub features: Var,
    /// Features with the key-side APE added (equal to `features` when APE is off).
    pub keys: Var,
    pub mask_features: Var,
    pub positions: Vec<Point>,
    pub bounds: SceneBounds,
}

/// Graph nodes of one layer's predictions.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub centers: Var,
    /// Centers in normalized scene coordinates.
    pub centers_norm: Var,
    pub class_logits: Var,
    pub mask_probs: Var,
}

/// Detached values of one layer's predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPrediction {
    pub centers: Vec<Point>,
    pub class_logits: Tensor,
    pub mask_probs: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub layers: Vec<LayerOutput>,
    /// `trace[t]` is `Q̂^p` entering layer `t`; the last entry is the final state.
    pub trace: Vec<Vec<Point>>,
}

impl ForwardPass {
    pub fn prediction(&self, g: &Graph, layer: usize) -> LayerPrediction {
        let out = &self.layers[layer];
        let c = g.value(out.centers);
        LayerPrediction {
            centers: (0..c.rows()).map(|i| [c.at(i, 0), c.at(i, 1), c.at(i, 2)]).collect(),
            class_logits: g.value(out.class_logits).clone(),
            mask_probs: g.value(out.mask_probs).clone(),
        }
    }

    pub fn predictions(&self, g: &Graph) -> Vec<LayerPrediction> {
        (0..self.layers.len()).map(|t| self.prediction(g, t)).collect()
    }

    pub fn last(&self, g: &Graph) -> LayerPrediction {
        self.prediction(g, self.layers.len() - 1)
    }
}

fn rows_to_points(t: &Tensor) -> Vec<Point> {
    (0..t.rows()).map(|i| [t.at(i, 0), t.at(i, 1), t.at(i, 2)]).collect()
}

fn points_tensor(p: &[Point]) -> Tensor {
    Tensor::new(vec![p.len(), 3], p.iter().flatten().copied().collect()).expect("n×3")
}

impl Model {
    /// Builds freshly initialized parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, DecoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let backbone = Backbone::new(&mut store, "backbone", RAW_FEATURES, d, &mut rng);
        let layers = (0..config.layers)
            .map(|t| DecoderLayer {
                cross: Attention::new(&mut store, &format!("layer{t}.cross"), d, &mut rng),
                cross_norm: LayerNorm::new(&mut store, &format!("layer{t}.cross_norm"), d),
                selfa: Attention::new(&mut store, &format!("layer{t}.self"), d, &mut rng),
                self_norm: LayerNorm::new(&mut store, &format!("layer{t}.self_norm"), d),
                ffn_in: Linear::new(&mut store, &format!("layer{t}.ffn.0"), d, config.ffn, &mut rng),
                ffn_out: Linear::new(&mut store, &format!("layer{t}.ffn.1"), config.ffn, d, &mut rng),
                ffn_norm: LayerNorm::new(&mut store, &format!("layer{t}.ffn_norm"), d),
            })
            .collect();
        let center_head = Mlp::zero_output(&mut store, "head.center", [d, d, 3], &mut rng);
        let class_head = Mlp::new(&mut store, "head.class", [d, d, config.num_classes + 1], &mut rng);
        let mask_head = Mlp::new(&mut store, "head.mask", [d, d, d], &mut rng);
        let logits: Vec<f64> = (0..config.queries * 3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let query_logits = store.add("query.logits", Tensor::new(vec![config.queries, 3], logits)?);
        let rpe = RpeTable::new(&mut store, "rpe.tables", d, config.rpe_quant, config.rpe_len, &mut rng)?;
        Ok(Self {
            config,
            params: store,
            backbone,
            layers,
            center_head,
            class_head,
            mask_head,
            query_logits,
            rpe,
        })
    }

    pub fn query_logits(&self) -> ParamId {
        self.query_logits
    }

    pub fn rpe_table(&self) -> ParamId {
        self.rpe.table
    }

    pub fn center_output(&self) -> &Linear {
        &self.center_head.output
    }

    /// Runs the backbone and the once-per-scene projections.
    pub fn encode(&self, g: &mut Graph, tokens: &SceneTokens, knn: &Arc<Vec<usize>>) -> Result<SceneContext, DecoderError> {
        let n = tokens.len();
        if n == 0 || !knn.len().is_multiple_of(n) {
            return Err(DecoderError::Contract(format!("{} neighbour indices for {n} tokens", knn.len())));
        }
        let p = &self.params;
        let features = self.backbone.forward(g, p, &tokens.features, knn, knn.len() / n)?;
        let mask_features = self.mask_head.forward(g, p, features)?;
        let keys = if self.config.ape {
            let norm: Vec<Point> = tokens.positions.iter().map(|q| tokens.bounds.normalize(*q)).collect();
            let ape = g.constant(fourier_ape(&norm, self.config.d, self.config.ape_temperature)?)?;
            g.add(features, ape)?
        } else {
            features
        };
        Ok(SceneContext {
            features,
            keys,
            mask_features,
            positions: tokens.positions.clone(),
            bounds: tokens.bounds,
        })
    }

    /// `Q^c_0 = 0` and `Q̂^p_0 = σ(logits)·(p_max − p_min) + p_min`.
    pub fn init_queries(&self, g: &mut Graph, bounds: &SceneBounds) -> Result<QueryState, DecoderError> {
        SceneBounds::new(bounds.p_min, bounds.p_max).map_err(|e| DecoderError::Contract(e.to_string()))?;
        let logits = g.param(&self.params, self.query_logits)?;
        let normalized = g.sigmoid(logits)?;
        let ext = g.constant(Tensor::vector(bounds.extent().to_vec()))?;
        let min = g.constant(Tensor::vector(bounds.p_min.to_vec()))?;
        let scaled = g.mul_row(normalized, ext)?;
        let absolute_var = g.add_row(scaled, min)?;
        let content = g.constant(Tensor::zeros(&[self.config.queries, self.config.d]))?;
        Ok(QueryState {
            content,
            absolute: rows_to_points(g.value(absolute_var)),
            absolute_var,
        })
    }

    fn query_ape(&self, g: &mut Graph, state: &QueryState, bounds: &SceneBounds) -> Result<Option<Var>, DecoderError> {
        if !self.config.ape {
            return Ok(None);
        }
        // Refined positions may leave the scene; the encoding saturates at the bounds.
        let norm: Vec<Point> = state.absolute.iter().map(|q| bounds.normalize(*q).map(|v| v.clamp(0.0, 1.0))).collect();
        Ok(Some(g.constant(fourier_ape(&norm, self.config.d, self.config.ape_temperature)?)?))
    }

    /// Cross-attention from queries to tokens, followed by residual and norm.
    ///
    /// `prev_mask` (row-major `n×N`, true = foreground) is required in
    /// mask-attention mode and ignored otherwise.
    pub fn cross_attention(
        &self,
        g: &mut Graph,
        layer: usize,
        state: &QueryState,
        ctx: &SceneContext,
        mode: AttentionMode,
        prev_mask: Option<&[bool]>,
    ) -> Result<Var, DecoderError> {
        let lp = &self.layers[layer];
        let q_ape = self.query_ape(g, state, &ctx.bounds)?;
        let err = at_layer(layer);
        let q_in = match q_ape {
            Some(a) => g.add(state.content, a).map_err(&err)?,
            None => state.content,
        };
        let heads = self.config.heads;
        let keep = match mode {
            AttentionMode::MaskAttention => Some(prev_mask.ok_or_else(|| {
                DecoderError::Contract(format!("mask attention at layer {layer} needs the previous mask"))
            })?),
            _ => None,
        };
        let out = if mode == AttentionMode::Rpe {
            let idx = Arc::new(quantize_relative(&state.absolute, &ctx.positions, self.rpe.quant, self.rpe.len)?);
            let tables = g.param(&self.params, self.rpe.table)?;
            let (w, len) = (self.config.head_width(), self.rpe.len);
            let mut bias = |g: &mut Graph, h: usize, qh: Var, kh: Var| -> Result<Var, NumError> {
                let th = if heads == 1 { tables } else { g.slice_cols(tables, h * w, (h + 1) * w)? };
                rpe_bias(g, &idx, len, th, qh, kh).map_err(|e| match e {
                    EncodeError::Num(n) => n,
                    other => NumError::Domain { op: "rpe_bias", detail: other.to_string() },
                })
            };
            let b: &mut HeadBias<'_> = &mut bias;
            lp.cross.forward(g, &self.params, heads, q_in, ctx.keys, ctx.features, None, Some(b))
        } else {
            lp.cross.forward(g, &self.params, heads, q_in, ctx.keys, ctx.features, keep, None)
        }
        .map_err(&err)?;
        let res = g.add(state.content, out).map_err(&err)?;
        lp.cross_norm.forward(g, &self.params, res).map_err(&err)
    }

    fn self_attention(&self, g: &mut Graph, layer: usize, content: Var, q_ape: Option<Var>) -> Result<Var, NumError> {
        let lp = &self.layers[layer];
        let qk = match q_ape {
            Some(a) => g.add(content, a)?,
            None => content,
        };
        let out = lp.selfa.forward(g, &self.params, self.config.heads, qk, qk, content, None, None)?;
        let res = g.add(content, out)?;
        lp.self_norm.forward(g, &self.params, res)
    }

    fn ffn(&self, g: &mut Graph, layer: usize, content: Var) -> Result<Var, NumError> {
        let lp = &self.layers[layer];
        let h = lp.ffn_in.forward(g, &self.params, content)?;
        let h = g.relu(h)?;
        let out = lp.ffn_out.forward(g, &self.params, h)?;
        let res = g.add(content, out)?;
        lp.ffn_norm.forward(g, &self.params, res)
    }

    /// One decoder layer: cross-attention, self-attention, FFN, heads, then
    /// position refinement. The center offset doubles as the position update.
    pub fn decoder_layer(
        &self,
        g: &mut Graph,
        layer: usize,
        state: &QueryState,
        ctx: &SceneContext,
        mode: AttentionMode,
        prev_mask: Option<&[bool]>,
    ) -> Result<(QueryState, LayerOutput), DecoderError> {
        let err = at_layer(layer);
        let content = self.cross_attention(g, layer, state, ctx, mode, prev_mask)?;
        let q_ape = self.query_ape(g, state, &ctx.bounds).map_err(enc_or(layer))?;
        let content = self.self_attention(g, layer, content, q_ape).map_err(&err)?;
        let content = self.ffn(g, layer, content).map_err(&err)?;

        let p = &self.params;
        let offset = self.center_head.forward(g, p, content).map_err(&err)?;
        let centers = g.add(offset, state.absolute_var).map_err(&err)?;
        let class_logits = self.class_head.forward(g, p, content).map_err(&err)?;
        let mask_logits = g.matmul_nt(content, ctx.mask_features).map_err(&err)?;
        let mask_probs = g.sigmoid(mask_logits).map_err(&err)?;

        let ext = ctx.bounds.extent();
        let neg_min = g.constant(Tensor::vector(ctx.bounds.p_min.iter().map(|v| -v).collect()))?;
        let inv_ext = g.constant(Tensor::vector(ext.iter().map(|e| if *e > 0.0 { 1.0 / e } else { 0.0 }).collect()))?;
        let shifted = g.add_row(centers, neg_min).map_err(&err)?;
        let centers_norm = g.mul_row(shifted, inv_ext).map_err(&err)?;

        let next = if self.config.refine {
            let absolute = rows_to_points(g.value(centers));
            let absolute_var = g.constant(points_tensor(&absolute))?;
            QueryState { content, absolute, absolute_var }
        } else {
            QueryState { content, absolute: state.absolute.clone(), absolute_var: state.absolute_var }
        };
        Ok((next, LayerOutput { centers, centers_norm, class_logits, mask_probs }))
    }

    /// Full forward pass over one scene.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &SceneTokens,
        knn: &Arc<Vec<usize>>,
        mode: AttentionMode,
    ) -> Result<ForwardPass, DecoderError> {
        let ctx = self.encode(g, tokens, knn)?;
        let mut state = self.init_queries(g, &ctx.bounds)?;
        let mut prev_mask = match mode {
            // Initial mask of Q^c_0 against the mask features.
            AttentionMode::MaskAttention => {
                let logits = g.value(state.content).clone();
                let feats = g.value(ctx.mask_features);
                Some(foreground(&matmul_nt_values(&logits, feats)))
            }
            _ => None,
        };
        let mut trace = vec![state.absolute.clone()];
        let mut layers = Vec::with_capacity(self.config.layers);
        for t in 0..self.config.layers {
            let (next, out) = self.decoder_layer(g, t, &state, &ctx, mode, prev_mask.as_deref())?;
            if mode == AttentionMode::MaskAttention {
                prev_mask = Some(g.value(out.mask_probs).data().iter().map(|p| *p >= 0.5).collect());
            }
            state = next;
            trace.push(state.absolute.clone());
            layers.push(out);
        }
        Ok(ForwardPass { layers, trace })
    }
}

fn enc_or(layer: usize) -> impl Fn(DecoderError) -> DecoderError {
    move |e| match e {
        DecoderError::Num(source) => DecoderError::Layer { layer, source },
        other => other,
    }
}

fn matmul_nt_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum());
        }
    }
    Tensor::new(vec![n, m], out).expect("n×m")
}

/// `σ(logit) ≥ 0.5`, i.e. `logit ≥ 0`.
fn foreground(logits: &Tensor) -> Vec<bool> {
    logits.data().iter().map(|v| *v >= 0.0).collect()
}
