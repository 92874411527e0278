//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive evaluates eagerly, checks its output for non-finite
//! values, and appends one node to the tape. [`Graph::backward`] walks the
//! tape in reverse and accumulates exact gradients into every node that
//! depends on a trainable leaf.

use std::sync::Arc;

use super::kernels::{axpy, dot, gemm, sigmoid};
use super::params::{ParamId, ParamStore};
use super::{NumError, Tensor};

const RPE_BLOCK: usize = 64;

/// Probability clamp used by the binary cross-entropy primitive.
pub const BCE_CLAMP: f64 = 1e-7;
/// Additive smoothing of the soft dice loss.
pub const DICE_SMOOTH: f64 = 1.0;
const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    NeighborMean { x: Var, idx: Arc<Vec<usize>>, k: usize },
    MaskedFill { x: Var, mask: Vec<bool> },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    RpeDot { q: Var, k: Var, t: Var, idx: Arc<Vec<u8>>, len: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Bce { p: Var, target: Arc<Tensor> },
    Dice { p: Var, target: Arc<Tensor> },
    L1 { a: Var, b: Var },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    bindings: Vec<(ParamId, Var)>,
    backward_done: bool,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Sum that does not depend on the order of `terms`.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Smoothed dice numerator `2Σpg + ε` and denominator `Σp + Σg + ε`, each
/// summed independently of element order.
fn dice_terms(p: &[f64], g: &[f64]) -> (f64, f64) {
    let inter = ordered_sum(p.iter().zip(g).map(|(a, b)| a * b).collect());
    let sp = ordered_sum(p.to_vec());
    let sg = ordered_sum(g.to_vec());
    (2.0 * inter + DICE_SMOOTH, sp + sg + DICE_SMOOTH)
}

fn mat_shape(t: &Tensor, transposed: bool) -> (usize, usize) {
    if transposed {
        (t.cols(), t.rows())
    } else {
        (t.rows(), t.cols())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_arc(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NumError> {
        self.leaf_arc(Arc::new(value), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumError> {
        self.leaf_arc(Arc::new(value), false)
    }

    /// Binds a stored parameter as a trainable leaf without copying it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, NumError> {
        let v = self.leaf_arc(store.shared(id), true)?;
        self.bindings.push((id, v));
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = mat_shape(av, a_t);
        let (k2, n) = mat_shape(bv, b_t);
        if k != k2 {
            return Err(NumError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), a_t, bv.data(), b_t, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, a_t, b_t }, &[a, b])
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.matmul_impl(a, b, true, false)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(NumError::Shape {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let c = av.cols();
        let r = rv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, r[i % c]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, row])
    }

    /// Adds a length-`cols` vector to every row (broadcast over leading axes).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumError> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumError> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, NumError> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumError> {
        if let Some(bad) = self.value(a).data().iter().find(|x| **x <= 0.0) {
            return Err(NumError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax of a matrix along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let (groups, len, outer, inner) = match axis {
            1 => (r, c, c, 1),
            0 => (c, r, 1, c),
            _ => {
                return Err(NumError::Domain {
                    op: "softmax",
                    detail: format!("axis {axis} on a matrix"),
                })
            }
        };
        let src = av.data();
        let mut out = vec![0.0; src.len()];
        for g in 0..groups {
            let base = g * outer;
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(src[base + t * inner]);
            }
            let mut total = 0.0;
            for t in 0..len {
                let e = (src[base + t * inner] - max).exp();
                out[base + t * inner] = e;
                total += e;
            }
            for t in 0..len {
                out[base + t * inner] /= total;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { x: a, axis }, &[a])
    }

    /// Row softmax where `keep[i]` false forces probability 0. A row with no
    /// kept entry falls back to an ordinary softmax over the whole row.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var, NumError> {
        let av = self.value(a);
        if keep.len() != av.len() {
            return Err(NumError::Shape {
                op: "masked_softmax",
                lhs: av.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let c = av.cols();
        let src = av.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..av.rows() {
            let row = &src[i * c..(i + 1) * c];
            let kr = &keep[i * c..(i + 1) * c];
            let any = kr.iter().any(|k| *k);
            let allowed = |j: usize| !any || kr[j];
            let mut max = f64::NEG_INFINITY;
            for (j, x) in row.iter().enumerate() {
                if allowed(j) {
                    max = max.max(*x);
                }
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for j in 0..c {
                if allowed(j) {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    total += e;
                }
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("masked_softmax", value, Op::MaskedSoftmax { x: a }, &[a])
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var, NumError> {
        let av = self.value(a);
        let c = av.cols();
        for (name, v) in [("layer_norm.gamma", gamma), ("layer_norm.beta", beta)] {
            if self.value(v).len() != c {
                return Err(NumError::Shape {
                    op: name,
                    lhs: av.shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = av.data();
        let rows = av.rows();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for i in 0..rows {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm { x: a, gamma, beta, xhat, inv_std },
            &[a, gamma, beta],
        )
    }

    // ---- indexing -------------------------------------------------------

    /// Selects rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumError> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(NumError::Index { op: "gather_rows", index: i, len: r });
            }
            out.extend_from_slice(av.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        self.push("gather_rows", value, Op::GatherRows { x: a, idx: idx.to_vec() }, &[a])
    }

    /// Row `i` of the output is the mean of rows `idx[i*k .. (i+1)*k]`.
    pub fn neighbor_mean(&mut self, a: Var, idx: Arc<Vec<usize>>, k: usize) -> Result<Var, NumError> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if k == 0 || !idx.len().is_multiple_of(k) {
            return Err(NumError::Shape {
                op: "neighbor_mean",
                lhs: av.shape().to_vec(),
                rhs: vec![idx.len(), k],
            });
        }
        let out_rows = idx.len() / k;
        let mut out = vec![0.0; out_rows * c];
        let w = 1.0 / k as f64;
        for i in 0..out_rows {
            let o = &mut out[i * c..(i + 1) * c];
            for &s in &idx[i * k..(i + 1) * k] {
                if s >= r {
                    return Err(NumError::Index { op: "neighbor_mean", index: s, len: r });
                }
                axpy(w, av.row(s), o);
            }
        }
        let value = Tensor::new(vec![out_rows, c], out)?;
        self.push("neighbor_mean", value, Op::NeighborMean { x: a, idx, k }, &[a])
    }

    /// Replaces entries where `mask` is true with a finite constant.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var, NumError> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(NumError::Shape {
                op: "masked_fill",
                lhs: av.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = av
            .data()
            .iter()
            .zip(mask)
            .map(|(x, m)| if *m { fill } else { *x })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("masked_fill", value, Op::MaskedFill { x: a, mask: mask.to_vec() }, &[a])
    }

    // ---- reductions and reshaping --------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(NumError::Domain { op: "mean", detail: "empty tensor".into() });
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums each row: `[r, c] -> [r]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, NumError> {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        self.push("row_sum", Tensor::vector(data), Op::RowSum(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(NumError::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(*p).shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(NumError::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(NumError::Shape {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(av.rows() * w);
        for i in 0..av.rows() {
            out.extend_from_slice(&av.row(i)[start..end]);
        }
        let value = Tensor::new(vec![av.rows(), w], out)?;
        self.push("slice_cols", value, Op::SliceCols { x: a, start }, &[a])
    }

    /// Relative-position attention bias.
    ///
    /// `q` is `n×w`, `k` is `N×w`, `t` holds the three stacked `L×w`
    /// encoding tables (`3L×w`) and `idx` has `n·N·3` indices in `[0, len)`.
    /// Output `n×N` with `out[i,j] = f_ij · (q_i + k_j)` where
    /// `f_ij = Σ_a t[a·L + idx[i,j,a]]`.
    pub fn rpe_dot(&mut self, q: Var, k: Var, t: Var, idx: Arc<Vec<u8>>, len: usize) -> Result<Var, NumError> {
        let (qv, kv, tv) = (self.value(q), self.value(k), self.value(t));
        let (n, nk, w) = (qv.rows(), kv.rows(), qv.cols());
        if kv.cols() != w || tv.cols() != w || tv.rows() != 3 * len || idx.len() != n * nk * 3 {
            return Err(NumError::Shape {
                op: "rpe_dot",
                lhs: qv.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        if let Some(&bad) = idx.iter().find(|v| **v as usize >= len) {
            return Err(NumError::Index { op: "rpe_dot", index: bad as usize, len });
        }
        let (qd, kd, td) = (qv.data(), kv.data(), tv.data());
        let mut out = vec![0.0; n * nk];
        let mut f = vec![0.0; w];
        for_each_pair(n, nk, |i, j| {
            let rows = table_rows(&idx, i, j, nk, len);
            pos_encoding(td, rows, w, &mut f);
            let (qi, kj) = (&qd[i * w..(i + 1) * w], &kd[j * w..(j + 1) * w]);
            out[i * nk + j] = (0..w).map(|c| f[c] * (qi[c] + kj[c])).sum();
        });
        let value = Tensor::new(vec![n, nk], out)?;
        self.push("rpe_dot", value, Op::RpeDot { q, k, t, idx, len }, &[q, k, t])
    }

    // ---- losses ---------------------------------------------------------

    /// Weighted cross-entropy of row logits against integer targets,
    /// normalised by the total weight.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var, NumError> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.len() != r || weights.len() != r {
            return Err(NumError::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(NumError::Domain { op: "cross_entropy", detail: "weights sum to zero".into() });
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let t = targets[i];
            if t >= c {
                return Err(NumError::Index { op: "cross_entropy", index: t, len: c });
            }
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += weights[i] * (lse - row[t]);
        }
        let value = Tensor::scalar(loss / wsum);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            &[logits],
        )
    }

    fn check_probs(&self, op: &'static str, p: Var, target: &Tensor) -> Result<(), NumError> {
        let pv = self.value(p);
        check_same(op, pv, target)?;
        if let Some(bad) = pv.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(NumError::Domain { op, detail: format!("probability {bad} outside [0, 1]") });
        }
        Ok(())
    }

    /// Mean binary cross-entropy of probabilities against binary targets.
    pub fn bce(&mut self, p: Var, target: Arc<Tensor>) -> Result<Var, NumError> {
        self.check_probs("bce", p, &target)?;
        let pv = self.value(p);
        if pv.is_empty() {
            return Err(NumError::Domain { op: "bce", detail: "empty tensor".into() });
        }
        let terms = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, g)| {
                let x = x.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(g * x.ln() + (1.0 - g) * (1.0 - x).ln())
            })
            .collect();
        let value = Tensor::scalar(ordered_sum(terms) / pv.len() as f64);
        self.push("bce", value, Op::Bce { p, target }, &[p])
    }

    /// Soft dice loss per row, averaged over rows.
    pub fn dice(&mut self, p: Var, target: Arc<Tensor>) -> Result<Var, NumError> {
        self.check_probs("dice", p, &target)?;
        let pv = self.value(p);
        let r = pv.rows();
        if r == 0 {
            return Err(NumError::Domain { op: "dice", detail: "no rows".into() });
        }
        let mut total = 0.0;
        for i in 0..r {
            let (num, den) = dice_terms(pv.row(i), target.row(i));
            total += 1.0 - num / den;
        }
        let value = Tensor::scalar(total / r as f64);
        self.push("dice", value, Op::Dice { p, target }, &[p])
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("l1", av, bv)?;
        if av.is_empty() {
            return Err(NumError::Domain { op: "l1", detail: "empty tensor".into() });
        }
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum();
        let value = Tensor::scalar(s / av.len() as f64);
        self.push("l1", value, Op::L1 { a, b }, &[a, b])
    }

    // ---- reverse pass ---------------------------------------------------

    /// Accumulates d`output`/d(every node). `output` must be a scalar.
    pub fn backward(&mut self, output: Var) -> Result<(), NumError> {
        if self.backward_done {
            return Err(NumError::BackwardTwice);
        }
        if self.value(output).len() != 1 {
            return Err(NumError::Shape {
                op: "backward",
                lhs: self.value(output).shape().to_vec(),
                rhs: vec![1],
            });
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Tensor::new(n.value.shape().to_vec(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(())
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every bound parameter, indexed by [`ParamId`].
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];
        for (id, v) in &self.bindings {
            if let Some(g) = self.grad(*v) {
                match &mut out[id.index()] {
                    Some(acc) => axpy(1.0, g.data(), acc.data_mut()),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = mat_shape(av, *a_t);
                let n = node.value.cols();
                if let Some(ga) = self.buf(grads, *a) {
                    // dA = G·op(B)ᵀ, stored in A's layout.
                    if *a_t {
                        // A stored k×m: dA = op(B)·Gᵀ
                        gemm(k, n, m, bv.data(), *b_t, g, true, ga, true);
                    } else {
                        gemm(m, n, k, g, false, bv.data(), !*b_t, ga, true);
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    if *b_t {
                        // B stored n×k: dB = Gᵀ·op(A)
                        gemm(n, m, k, g, true, av.data(), *a_t, gb, true);
                    } else {
                        gemm(k, m, n, av.data(), !*a_t, g, false, gb, true);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                if let Some(ga) = self.buf(grads, *a) {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                if let Some(gb) = self.buf(grads, *b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.buf(grads, *a) {
                    for t in 0..g.len() {
                        ga[t] += g[t] * bv[t];
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for t in 0..g.len() {
                        gb[t] += g[t] * av[t];
                    }
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g);
                let c = self.value(*row).len();
                if let Some(gr) = self.buf(grads, *row) {
                    for (t, gv) in g.iter().enumerate() {
                        gr[t % c] += gv;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a).data(), self.value(*row).data());
                let c = rv.len();
                if let Some(ga) = self.buf(grads, *a) {
                    for t in 0..g.len() {
                        ga[t] += g[t] * rv[t % c];
                    }
                }
                if let Some(gr) = self.buf(grads, *row) {
                    for t in 0..g.len() {
                        gr[t % c] += g[t] * av[t];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(*s, g, ga);
                }
            }
            Op::AddScalar(a) => self.acc(grads, *a, g),
            Op::Exp(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for t in 0..g.len() {
                        ga[t] += g[t] * out[t];
                    }
                }
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.buf(grads, *a) {
                    for t in 0..g.len() {
                        ga[t] += g[t] / av[t];
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for t in 0..g.len() {
                        ga[t] += g[t] * out[t] * (1.0 - out[t]);
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.buf(grads, *a) {
                    for t in 0..g.len() {
                        if av[t] > 0.0 {
                            ga[t] += g[t];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let (groups, len, outer, inner) = if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                if let Some(gx) = self.buf(grads, *x) {
                    for gi in 0..groups {
                        let base = gi * outer;
                        let mut s = 0.0;
                        for t in 0..len {
                            let p = base + t * inner;
                            s += g[p] * out[p];
                        }
                        for t in 0..len {
                            let p = base + t * inner;
                            gx[p] += out[p] * (g[p] - s);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for (row, (go, yo)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                        let s = dot(go, yo);
                        let gr = &mut gx[row * c..(row + 1) * c];
                        for j in 0..c {
                            gr[j] += yo[j] * (go[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = self.value(*x).cols();
                let gm = self.value(*gamma).data();
                if let Some(gg) = self.buf(grads, *gamma) {
                    for t in 0..g.len() {
                        gg[t % c] += g[t] * xhat[t];
                    }
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    for t in 0..g.len() {
                        gb[t % c] += g[t];
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let mut dh = vec![0.0; c];
                    for (row, is) in inv_std.iter().enumerate() {
                        let go = &g[row * c..(row + 1) * c];
                        let xh = &xhat[row * c..(row + 1) * c];
                        for j in 0..c {
                            dh[j] = go[j] * gm[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhx = dot(&dh, xh) / c as f64;
                        let gr = &mut gx[row * c..(row + 1) * c];
                        for j in 0..c {
                            gr[j] += is * (dh[j] - mean_dh - xh[j] * mean_dhx);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for (o, &s) in idx.iter().enumerate() {
                        axpy(1.0, &g[o * c..(o + 1) * c], &mut gx[s * c..(s + 1) * c]);
                    }
                }
            }
            Op::NeighborMean { x, idx, k } => {
                let c = self.value(*x).cols();
                let w = 1.0 / *k as f64;
                if let Some(gx) = self.buf(grads, *x) {
                    for (o, nb) in idx.chunks(*k).enumerate() {
                        for &s in nb {
                            axpy(w, &g[o * c..(o + 1) * c], &mut gx[s * c..(s + 1) * c]);
                        }
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for t in 0..g.len() {
                        if !mask[t] {
                            gx[t] += g[t];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::RowSum(a) => {
                let c = self.value(*a).cols();
                if let Some(ga) = self.buf(grads, *a) {
                    for (t, v) in ga.iter_mut().enumerate() {
                        *v += g[t / c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(gp) = self.buf(grads, *p) {
                        for (row, chunk) in gp.chunks_mut(w).enumerate() {
                            axpy(1.0, &g[row * total + off..row * total + off + w], chunk);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let l = self.value(*p).len();
                    if let Some(gp) = self.buf(grads, *p) {
                        axpy(1.0, &g[off..off + l], gp);
                    }
                    off += l;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = node.value.cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for (row, chunk) in g.chunks(w).enumerate() {
                        axpy(1.0, chunk, &mut gx[row * c + start..row * c + start + w]);
                    }
                }
            }
            Op::RpeDot { q, k, t, idx, len } => {
                let (qd, kd, td) = (self.value(*q).data(), self.value(*k).data(), self.value(*t).data());
                let w = self.value(*q).cols();
                let (n, nk) = (node.value.rows(), node.value.cols());
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gt = vec![0.0; td.len()];
                let mut f = vec![0.0; w];
                for_each_pair(n, nk, |i, j| {
                    let gv = g[i * nk + j];
                    let rows = table_rows(idx, i, j, nk, *len);
                    pos_encoding(td, rows, w, &mut f);
                    let (qi, kj) = (&qd[i * w..(i + 1) * w], &kd[j * w..(j + 1) * w]);
                    axpy(gv, &f, &mut gq[i * w..(i + 1) * w]);
                    axpy(gv, &f, &mut gk[j * w..(j + 1) * w]);
                    for r in rows {
                        let dst = &mut gt[r * w..(r + 1) * w];
                        for c in 0..w {
                            dst[c] += gv * (qi[c] + kj[c]);
                        }
                    }
                });
                self.acc(grads, *q, &gq);
                self.acc(grads, *k, &gk);
                self.acc(grads, *t, &gt);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let c = self.value(*logits).cols();
                let wsum: f64 = weights.iter().sum();
                if let Some(gl) = self.buf(grads, *logits) {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let s = g[0] * w / wsum;
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Bce { p, target } => {
                let pv = self.value(*p).data();
                let scale = g[0] / pv.len() as f64;
                if let Some(gp) = self.buf(grads, *p) {
                    for (t, (x, y)) in pv.iter().zip(target.data()).enumerate() {
                        if *x > BCE_CLAMP && *x < 1.0 - BCE_CLAMP {
                            gp[t] += scale * ((1.0 - y) / (1.0 - x) - y / x);
                        }
                    }
                }
            }
            Op::Dice { p, target } => {
                let pv = self.value(*p);
                let (r, c) = (pv.rows(), pv.cols());
                if let Some(gp) = self.buf(grads, *p) {
                    for i in 0..r {
                        let gr = target.row(i);
                        let (num, den) = dice_terms(pv.row(i), gr);
                        let s = g[0] / r as f64;
                        for j in 0..c {
                            gp[i * c + j] -= s * (2.0 * gr[j] * den - num) / (den * den);
                        }
                    }
                }
            }
            Op::L1 { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = g[0] / av.len() as f64;
                let sign = |t: usize| {
                    let d = av[t] - bv[t];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if let Some(ga) = self.buf(grads, *a) {
                    for (t, v) in ga.iter_mut().enumerate() {
                        *v += s * sign(t);
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for (t, v) in gb.iter_mut().enumerate() {
                        *v -= s * sign(t);
                    }
                }
            }
        }
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if let Some(b) = self.buf(grads, v) {
            axpy(1.0, g, b);
        }
    }
}

/// Visits every `(query, token)` pair in token blocks, so the touched rows of
/// the token-side operand stay cache resident.
fn for_each_pair(n: usize, nk: usize, mut f: impl FnMut(usize, usize)) {
    for j0 in (0..nk).step_by(RPE_BLOCK) {
        let j1 = (j0 + RPE_BLOCK).min(nk);
        for i in 0..n {
            for j in j0..j1 {
                f(i, j);
            }
        }
    }
}

/// Rows of the stacked `3L×w` table selected for pair `(i, j)`.
#[inline]
fn table_rows(idx: &[u8], i: usize, j: usize, nk: usize, len: usize) -> [usize; 3] {
    let r = &idx[(i * nk + j) * 3..(i * nk + j) * 3 + 3];
    [r[0] as usize, len + r[1] as usize, 2 * len + r[2] as usize]
}

#[inline]
fn pos_encoding(table: &[f64], rows: [usize; 3], w: usize, out: &mut [f64]) {
    let (a, b, c) = (&table[rows[0] * w..][..w], &table[rows[1] * w..][..w], &table[rows[2] * w..][..w]);
    for x in 0..w {
        out[x] = a[x] + b[x] + c[x];
    }
}
