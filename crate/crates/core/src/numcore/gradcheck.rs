use super::{Graph, NumError, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the reverse-mode gradient of a scalar function of one tensor
/// against central differences at every coordinate.
pub fn gradient_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheck, NumError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone())?;
    let out = f(&mut g, x)?;
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: Tensor| -> Result<f64, NumError> {
        let mut g = Graph::new();
        let x = g.constant(p)?;
        let out = f(&mut g, x)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(NumError::NonFinite { op: "gradient_check" });
        }
        Ok(v)
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut worst = (0.0, 0);
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let d = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let e = relative_error(a, d);
        if e > worst.0 {
            worst = (e, i);
        }
        numeric.push(d);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_to_second_order() {
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let r = gradient_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &p,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
        assert!((r.analytic[2] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let p = Tensor::vector(vec![0.5, -0.5]);
        let r = gradient_check(
            |g, x| {
                let z = g.scale(x, 0.0)?;
                let s = g.sum(z)?;
                g.add_scalar(s, 3.0)
            },
            &p,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.analytic.iter().all(|v| v.abs() < 1e-15));
        assert!(r.numeric.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn relative_error_uses_unit_floor() {
        assert_eq!(relative_error(0.0, 1e-3), 1e-3);
        assert!((relative_error(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-15);
    }
}
