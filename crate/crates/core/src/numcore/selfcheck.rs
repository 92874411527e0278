//! Finite-difference verification of every graph primitive.
//!
//! Each check reduces the primitive's output to a scalar through a fixed
//! random weighting, then compares reverse-mode and central-difference
//! gradients with respect to one differentiable input.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradient_check, Graph, NumError, Tensor, Var, DEFAULT_STEP};

/// Result for one primitive/input pair.
#[derive(Clone, Debug)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Uniform values in `[lo, hi]` kept at least `gap` away from zero, so kinks
/// (relu, |·|) are never straddled by a finite-difference probe.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var, NumError> {
    let wv = g.constant(w.clone())?;
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn check<F>(
    name: &'static str,
    out_shape: &[usize],
    point: &Tensor,
    rng: &mut ChaCha8Rng,
    f: F,
) -> Result<PrimitiveCheck, NumError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumError>,
{
    let w = uniform(rng, out_shape, -1.0, 1.0);
    let r = gradient_check(
        |g, x| {
            let y = f(g, x)?;
            if g.value(y).len() == 1 {
                Ok(y)
            } else {
                weighted_sum(g, y, &w)
            }
        },
        point,
        DEFAULT_STEP,
    )?;
    Ok(PrimitiveCheck {
        name,
        max_rel_error: r.max_rel_error,
    })
}

/// Runs the gradient check for every primitive on random inputs in `[−2, 2]`
/// (shifted into the primitive's domain where it has one).
pub fn primitive_suite(seed: u64) -> Result<Vec<PrimitiveCheck>, NumError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let a = uniform(r, &[3, 4], -2.0, 2.0);
    let b = uniform(r, &[4, 5], -2.0, 2.0);
    let bt = uniform(r, &[5, 4], -2.0, 2.0);
    let at = uniform(r, &[4, 3], -2.0, 2.0);
    let same = uniform(r, &[3, 4], -2.0, 2.0);
    let row = uniform(r, &[4], -2.0, 2.0);

    {
        let b = b.clone();
        out.push(check("matmul.lhs", &[3, 5], &a, r, move |g, x| {
            let c = g.constant(b.clone())?;
            g.matmul(x, c)
        })?);
    }
    {
        let a = a.clone();
        out.push(check("matmul.rhs", &[3, 5], &b, r, move |g, x| {
            let c = g.constant(a.clone())?;
            g.matmul(c, x)
        })?);
    }
    {
        let bt = bt.clone();
        out.push(check("matmul_nt.lhs", &[3, 5], &a, r, move |g, x| {
            let c = g.constant(bt.clone())?;
            g.matmul_nt(x, c)
        })?);
    }
    {
        let a = a.clone();
        out.push(check("matmul_nt.rhs", &[3, 5], &bt, r, move |g, x| {
            let c = g.constant(a.clone())?;
            g.matmul_nt(c, x)
        })?);
    }
    {
        let b = b.clone();
        out.push(check("matmul_tn.lhs", &[3, 5], &at, r, move |g, x| {
            let c = g.constant(b.clone())?;
            g.matmul_tn(x, c)
        })?);
    }
    {
        let at = at.clone();
        out.push(check("matmul_tn.rhs", &[3, 5], &b, r, move |g, x| {
            let c = g.constant(at.clone())?;
            g.matmul_tn(c, x)
        })?);
    }
    out.push(check("transpose", &[4, 3], &a, r, |g, x| g.transpose(x))?);
    {
        let s = same.clone();
        out.push(check("add", &[3, 4], &a, r, move |g, x| {
            let c = g.constant(s.clone())?;
            g.add(x, c)
        })?);
    }
    {
        let s = same.clone();
        out.push(check("sub.rhs", &[3, 4], &a, r, move |g, x| {
            let c = g.constant(s.clone())?;
            g.sub(c, x)
        })?);
    }
    {
        let s = same.clone();
        out.push(check("mul", &[3, 4], &a, r, move |g, x| {
            let c = g.constant(s.clone())?;
            g.mul(x, c)
        })?);
    }
    out.push(check("mul.self", &[3, 4], &a, r, |g, x| g.mul(x, x))?);
    {
        let a = a.clone();
        out.push(check("add_row.row", &[3, 4], &row, r, move |g, x| {
            let c = g.constant(a.clone())?;
            g.add_row(c, x)
        })?);
    }
    {
        let rw = row.clone();
        out.push(check("mul_row.lhs", &[3, 4], &a, r, move |g, x| {
            let c = g.constant(rw.clone())?;
            g.mul_row(x, c)
        })?);
    }
    {
        let a = a.clone();
        out.push(check("mul_row.row", &[3, 4], &row, r, move |g, x| {
            let c = g.constant(a.clone())?;
            g.mul_row(c, x)
        })?);
    }
    out.push(check("scale", &[3, 4], &a, r, |g, x| g.scale(x, -1.7))?);
    out.push(check("add_scalar", &[3, 4], &a, r, |g, x| g.add_scalar(x, 0.3))?);
    out.push(check("exp", &[3, 4], &a, r, |g, x| g.exp(x))?);
    let pos = uniform(r, &[3, 4], 0.2, 2.0);
    out.push(check("log", &[3, 4], &pos, r, |g, x| g.log(x))?);
    out.push(check("sigmoid", &[3, 4], &a, r, |g, x| g.sigmoid(x))?);
    let kinked = away_from_zero(r, &[3, 4], 0.05);
    out.push(check("relu", &[3, 4], &kinked, r, |g, x| g.relu(x))?);
    out.push(check("softmax.axis1", &[3, 4], &a, r, |g, x| g.softmax(x, 1))?);
    out.push(check("softmax.axis0", &[3, 4], &a, r, |g, x| g.softmax(x, 0))?);
    {
        let mut keep: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
        // Row 2 fully masked exercises the unmask-all fallback.
        keep[8..12].iter_mut().for_each(|k| *k = false);
        out.push(check("masked_softmax", &[3, 4], &a, r, move |g, x| g.masked_softmax(x, &keep))?);
    }
    {
        let gm = uniform(r, &[4], 0.5, 1.5);
        let bt = uniform(r, &[4], -0.5, 0.5);
        let (g2, b2) = (gm.clone(), bt.clone());
        out.push(check("layer_norm.x", &[3, 4], &a, r, move |g, x| {
            let gv = g.constant(g2.clone())?;
            let bv = g.constant(b2.clone())?;
            g.layer_norm(x, gv, bv)
        })?);
        let a2 = a.clone();
        let b3 = bt.clone();
        out.push(check("layer_norm.gamma", &[3, 4], &gm, r, move |g, x| {
            let av = g.constant(a2.clone())?;
            let bv = g.constant(b3.clone())?;
            g.layer_norm(av, x, bv)
        })?);
        let a3 = a.clone();
        out.push(check("layer_norm.beta", &[3, 4], &bt, r, move |g, x| {
            let av = g.constant(a3.clone())?;
            let gv = g.constant(gm.clone())?;
            g.layer_norm(av, gv, x)
        })?);
    }
    out.push(check("gather_rows", &[4, 4], &a, r, |g, x| g.gather_rows(x, &[2, 0, 2, 1]))?);
    {
        let idx = Arc::new(vec![0, 1, 1, 2, 2, 0]);
        out.push(check("neighbor_mean", &[3, 4], &a, r, move |g, x| g.neighbor_mean(x, Arc::clone(&idx), 2))?);
    }
    {
        let mask: Vec<bool> = (0..12).map(|i| i % 4 == 1).collect();
        out.push(check("masked_fill", &[3, 4], &a, r, move |g, x| g.masked_fill(x, &mask, -5.0))?);
    }
    out.push(check("sum", &[1], &a, r, |g, x| g.sum(x))?);
    out.push(check("mean", &[1], &a, r, |g, x| g.mean(x))?);
    out.push(check("row_sum", &[3], &a, r, |g, x| g.row_sum(x))?);
    {
        let s = uniform(r, &[3, 2], -2.0, 2.0);
        out.push(check("concat_cols", &[3, 6], &a, r, move |g, x| {
            let c = g.constant(s.clone())?;
            g.concat_cols(&[c, x])
        })?);
    }
    {
        let s = uniform(r, &[2, 4], -2.0, 2.0);
        out.push(check("concat_rows", &[5, 4], &a, r, move |g, x| {
            let c = g.constant(s.clone())?;
            g.concat_rows(&[x, c])
        })?);
    }
    out.push(check("slice_cols", &[3, 2], &a, r, |g, x| g.slice_cols(x, 1, 3))?);
    {
        let (len, w) = (4, 3);
        let (n, nk) = (2, 3);
        let q = uniform(r, &[n, w], -2.0, 2.0);
        let k = uniform(r, &[nk, w], -2.0, 2.0);
        let t = uniform(r, &[3 * len, w], -2.0, 2.0);
        let idx: Arc<Vec<u8>> = Arc::new((0..n * nk * 3).map(|_| r.gen_range(0..len as u8)).collect());
        let (k2, t2, i2) = (k.clone(), t.clone(), Arc::clone(&idx));
        out.push(check("rpe_dot.q", &[n, nk], &q, r, move |g, x| {
            let kv = g.constant(k2.clone())?;
            let tv = g.constant(t2.clone())?;
            g.rpe_dot(x, kv, tv, Arc::clone(&i2), len)
        })?);
        let (q2, t3, i3) = (q.clone(), t.clone(), Arc::clone(&idx));
        out.push(check("rpe_dot.k", &[n, nk], &k, r, move |g, x| {
            let qv = g.constant(q2.clone())?;
            let tv = g.constant(t3.clone())?;
            g.rpe_dot(qv, x, tv, Arc::clone(&i3), len)
        })?);
        out.push(check("rpe_dot.table", &[n, nk], &t, r, move |g, x| {
            let qv = g.constant(q.clone())?;
            let kv = g.constant(k.clone())?;
            g.rpe_dot(qv, kv, x, Arc::clone(&idx), len)
        })?);
    }
    out.push(check("cross_entropy", &[1], &a, r, |g, x| {
        g.cross_entropy(x, &[3, 0, 2], &[1.0, 0.1, 1.0])
    })?);
    let probs = uniform(r, &[3, 4], 0.05, 0.95);
    let target = Arc::new(Tensor::new(vec![3, 4], (0..12).map(|i| f64::from(i % 2 == 0)).collect())?);
    {
        let t = Arc::clone(&target);
        out.push(check("bce", &[1], &probs, r, move |g, x| g.bce(x, Arc::clone(&t)))?);
    }
    {
        let t = Arc::clone(&target);
        out.push(check("dice", &[1], &probs, r, move |g, x| g.dice(x, Arc::clone(&t)))?);
    }
    {
        let offset = away_from_zero(r, &[3, 4], 0.05);
        let base = a.clone();
        let other = Tensor::new(
            vec![3, 4],
            base.data().iter().zip(offset.data()).map(|(x, o)| x + o).collect(),
        )?;
        out.push(check("l1", &[1], &base, r, move |g, x| {
            let c = g.constant(other.clone())?;
            g.l1(x, c)
        })?);
    }
    Ok(out)
}
