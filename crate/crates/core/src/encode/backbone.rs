use std::sync::Arc;

use rand::Rng;

use crate::numcore::nn::{LayerNorm, Linear, Mlp};
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::par::Exec;
use crate::scene::Point;

use super::EncodeError;

pub const DEFAULT_KNN: usize = 16;

/// Per-token MLP followed by one k-nearest-neighbour mean-pooling block.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub point_mlp: Mlp,
    pub proj: Linear,
    pub norm: LayerNorm,
    pub width: usize,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, d: usize, rng: &mut R) -> Self {
        Self {
            point_mlp: Mlp::new(store, &format!("{name}.mlp"), [c_in, d, d], rng),
            proj: Linear::new(store, &format!("{name}.proj"), 2 * d, d, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            width: d,
        }
    }

    /// `F = LN([h ‖ mean_knn(h)]·W + b)` with `h = relu(MLP(x))`.
    ///
    /// `knn` holds `k` neighbour indices per token, as built by [`knn_indices`].
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &Tensor,
        knn: &Arc<Vec<usize>>,
        k: usize,
    ) -> Result<Var, EncodeError> {
        if features.rows() == 0 {
            return Err(EncodeError::NoTokens);
        }
        let x = g.constant(features.clone())?;
        let h = self.point_mlp.forward(g, store, x)?;
        let h = g.relu(h)?;
        let pooled = g.neighbor_mean(h, Arc::clone(knn), k)?;
        let cat = g.concat_cols(&[h, pooled])?;
        let y = self.proj.forward(g, store, cat)?;
        Ok(self.norm.forward(g, store, y)?)
    }
}

/// The `k` nearest tokens of every token (itself included), flattened
/// row-major. `k` is clipped to the token count; ties go to the lower index.
pub fn knn_indices(positions: &[Point], k: usize, exec: Exec) -> Result<(Vec<usize>, usize), EncodeError> {
    let n = positions.len();
    if n == 0 {
        return Err(EncodeError::NoTokens);
    }
    let k = k.clamp(1, n);
    let rows = exec.map(n, |i| {
        let p = positions[i];
        let mut d: Vec<(f64, usize)> = positions
            .iter()
            .enumerate()
            .map(|(j, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), j))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            d.select_nth_unstable_by(k - 1, cmp);
            d.truncate(k);
        }
        d.sort_unstable_by(cmp);
        d.into_iter().map(|(_, j)| j).collect::<Vec<_>>()
    });
    Ok((rows.into_iter().flatten().collect(), k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Point>, Tensor) {
        let pos: Vec<Point> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let mut f = Vec::new();
        for p in &pos {
            f.extend_from_slice(&[rng.gen(), rng.gen(), rng.gen()]);
            f.extend_from_slice(p);
        }
        (pos, Tensor::new(vec![n, 6], f).unwrap())
    }

    #[test]
    fn knn_brute_force_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (pos, _) = tokens(40, &mut rng);
        let (idx, k) = knn_indices(&pos, 5, Exec::Sequential).unwrap();
        assert_eq!(k, 5);
        for i in 0..40 {
            let mut all: Vec<usize> = (0..40).collect();
            let d = |j: usize| (0..3).map(|a| (pos[i][a] - pos[j][a]).powi(2)).sum::<f64>();
            all.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
            assert_eq!(&idx[i * 5..i * 5 + 5], &all[..5]);
            assert_eq!(idx[i * 5], i);
        }
        assert_eq!(knn_indices(&pos, 100, Exec::Parallel).unwrap().1, 40);
        assert_eq!(knn_indices(&pos, 5, Exec::Parallel).unwrap().0, idx);
    }

    #[test]
    fn permuting_tokens_permutes_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pos, feats) = tokens(30, &mut rng);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, "bb", 6, 16, &mut rng);
        let run = |pos: &[Point], feats: &Tensor| {
            let (knn, k) = knn_indices(pos, DEFAULT_KNN, Exec::Sequential).unwrap();
            let mut g = Graph::new();
            let f = bb.forward(&mut g, &store, feats, &Arc::new(knn), k).unwrap();
            g.value(f).clone()
        };
        let base = run(&pos, &feats);
        assert_eq!(base.shape(), &[30, 16]);
        let perm: Vec<usize> = (0..30).rev().collect();
        let ppos: Vec<Point> = perm.iter().map(|&i| pos[i]).collect();
        let mut pf = Vec::new();
        for &i in &perm {
            pf.extend_from_slice(feats.row(i));
        }
        let out = run(&ppos, &Tensor::new(vec![30, 6], pf).unwrap());
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in out.row(new).iter().zip(base.row(old)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_tokens_is_an_error() {
        assert!(matches!(knn_indices(&[], 4, Exec::Sequential), Err(EncodeError::NoTokens)));
    }
}
