//! Parameterised building blocks composed from graph primitives.

use rand::Rng;

use super::{Graph, NumError, ParamId, ParamStore, Tensor, Var};

/// Affine map `x·W + b` with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform `±1/√fan_in` initialisation.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::new(vec![fan_in, fan_out], w).expect("shape")),
            bias: store.add(format!("{name}.bias"), Tensor::vector(b)),
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            output: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng),
        }
    }

    /// Same as [`Mlp::new`] but the output layer starts at zero.
    pub fn zero_output<R: Rng>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            output: Linear::zeroed(store, &format!("{name}.1"), dims[1], dims[2]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.output.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}
