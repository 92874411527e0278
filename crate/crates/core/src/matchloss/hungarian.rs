use crate::numcore::Tensor;

use super::MatchError;

/// Matched query of every GT instance (`query_of_gt[k]`), plus the summed cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub query_of_gt: Vec<usize>,
    pub total: f64,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.query_of_gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_of_gt.is_empty()
    }

    /// GT index matched to each query, if any.
    pub fn gt_of_query(&self, n_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_queries];
        for (k, &q) in self.query_of_gt.iter().enumerate() {
            out[q] = Some(k);
        }
        out
    }
}

/// Shortest augmenting path solver on an `r × c` matrix with `r ≤ c`,
/// returning the column of each row and the dual potentials.
struct Solved {
    col_of_row: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

fn solve(cost: &dyn Fn(usize, usize) -> f64, r: usize, c: usize) -> Solved {
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0; r + 1];
    let mut v = vec![0.0; c + 1];
    let mut row_of_col = vec![0usize; c + 1];
    let mut way = vec![0usize; c + 1];
    for i in 1..=r {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=c {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=c {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; r];
    for j in 1..=c {
        if row_of_col[j] != 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    Solved { col_of_row, u: u[1..].to_vec(), v: v[1..].to_vec() }
}

/// Minimum-cost injective assignment of the `m` columns (GT instances) of an
/// `n × m` cost matrix to distinct rows (queries).
///
/// Among optimal assignments the lexicographically smallest
/// `(query_of_gt[0], query_of_gt[1], …)` is returned. Candidates are the
/// edges left tight by the optimal duals; each is confirmed by re-solving
/// with the prefix fixed.
pub fn hungarian(cost: &Tensor) -> Result<Assignment, MatchError> {
    let (n, m) = (cost.rows(), cost.cols());
    if cost.shape().len() != 2 {
        return Err(MatchError::Shape(format!("cost matrix must be 2-d, got {:?}", cost.shape())));
    }
    if m > n {
        return Err(MatchError::Capacity { instances: m, queries: n });
    }
    if !cost.is_finite() {
        return Err(MatchError::Domain("cost matrix has non-finite entries".into()));
    }
    if m == 0 {
        return Ok(Assignment { query_of_gt: Vec::new(), total: 0.0 });
    }
    let c = |k: usize, q: usize| cost.at(q, k);
    // Rows are GT instances, columns are queries.
    let base = solve(&c, m, n);
    let best: f64 = (0..m).map(|k| c(k, base.col_of_row[k])).sum();
    let tol = 1e-9 * (1.0 + cost.max_abs() * m as f64);

    let mut current = base.col_of_row.clone();
    let mut fixed: Vec<usize> = Vec::with_capacity(m);
    for k in 0..m {
        let tight = |q: usize| c(k, q) - base.u[k] - base.v[q] <= tol;
        let mut chosen = current[k];
        for q in 0..current[k] {
            if fixed.contains(&q) || !tight(q) {
                continue;
            }
            if let Some(rest) = completion(&c, m, n, &fixed, k, q) {
                let total: f64 = fixed.iter().enumerate().map(|(i, &fq)| c(i, fq)).sum::<f64>()
                    + c(k, q)
                    + rest.iter().map(|&(i, fq)| c(i, fq)).sum::<f64>();
                if total <= best + tol {
                    for &(i, fq) in &rest {
                        current[i] = fq;
                    }
                    chosen = q;
                    break;
                }
            }
        }
        current[k] = chosen;
        fixed.push(chosen);
    }
    let total = (0..m).map(|k| c(k, current[k])).sum();
    Ok(Assignment { query_of_gt: current, total })
}

/// Optimal assignment of GT rows `k+1..m` to queries outside `fixed ∪ {q}`.
fn completion(
    c: &dyn Fn(usize, usize) -> f64,
    m: usize,
    n: usize,
    fixed: &[usize],
    k: usize,
    q: usize,
) -> Option<Vec<(usize, usize)>> {
    let rows: Vec<usize> = (k + 1..m).collect();
    let cols: Vec<usize> = (0..n).filter(|j| *j != q && !fixed.contains(j)).collect();
    if rows.len() > cols.len() {
        return None;
    }
    if rows.is_empty() {
        return Some(Vec::new());
    }
    let sub = |i: usize, j: usize| c(rows[i], cols[j]);
    let s = solve(&sub, rows.len(), cols.len());
    Some(rows.iter().enumerate().map(|(i, &r)| (r, cols[s.col_of_row[i]])).collect())
}
