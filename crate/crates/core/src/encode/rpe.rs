use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scene::Point;

use super::EncodeError;

const TABLE_INIT_STD: f64 = 0.02;

/// Three learnable encoding tables (one per axis), stored as `3 × L × d`.
#[derive(Clone, Debug)]
pub struct RpeTable {
    pub table: ParamId,
    pub quant: f64,
    pub len: usize,
}

impl RpeTable {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        quant: f64,
        len: usize,
        rng: &mut R,
    ) -> Result<Self, EncodeError> {
        check_table_params(quant, len)?;
        let normal = Normal::new(0.0, TABLE_INIT_STD).expect("valid std");
        let data = (0..3 * len * d).map(|_| normal.sample(rng)).collect();
        let table = store.add(name, Tensor::new(vec![3, len, d], data)?);
        Ok(Self { table, quant, len })
    }
}

fn check_table_params(quant: f64, len: usize) -> Result<(), EncodeError> {
    if !(quant.is_finite() && quant > 0.0) {
        return Err(EncodeError::Parameter(format!("quantization size must be positive, got {quant}")));
    }
    if len == 0 || !len.is_multiple_of(2) || len > 256 {
        return Err(EncodeError::Parameter(format!("table length must be even and in [2, 256], got {len}")));
    }
    Ok(())
}

/// Table indices `clamp(⌊(q_i − p_j)/s⌋ + L/2, 0, L−1)`, laid out `[i][j][axis]`.
pub fn quantize_relative(q_abs: &[Point], p: &[Point], quant: f64, len: usize) -> Result<Vec<u8>, EncodeError> {
    check_table_params(quant, len)?;
    let half = (len / 2) as f64;
    let top = (len - 1) as f64;
    let mut out = Vec::with_capacity(q_abs.len() * p.len() * 3);
    for q in q_abs {
        for pj in p {
            for a in 0..3 {
                let raw = ((q[a] - pj[a]) / quant).floor() + half;
                out.push(raw.clamp(0.0, top) as u8);
            }
        }
    }
    Ok(out)
}

/// Attention bias `b_ij = f^pos_ij · f_q_i + f^pos_ij · f_k_j` with
/// `f^pos_ij = Σ_a t[a, r̂_ij,a]`.
///
/// `tables` is the `3L × w` slice of the tables for one head and `f_q`, `f_k`
/// are that head's `n × w` and `N × w` projections.
pub fn rpe_bias(
    g: &mut Graph,
    idx: &Arc<Vec<u8>>,
    len: usize,
    tables: Var,
    f_q: Var,
    f_k: Var,
) -> Result<Var, EncodeError> {
    Ok(g.rpe_dot(f_q, f_k, tables, Arc::clone(idx), len)?)
}
