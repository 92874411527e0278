use super::{NumError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(config: AdamWConfig, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies one update at learning rate `lr` (the schedule's current value).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<(), NumError> {
        for id in params.ids() {
            let g = grads.get(id.index()).and_then(Option::as_ref);
            match g {
                None => return Err(NumError::MissingGradient(params.name(id).to_string())),
                Some(g) if g.shape() != params.get(id).shape() => {
                    return Err(NumError::Shape {
                        op: "adamw",
                        lhs: params.get(id).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if self.first.len() != params.len() {
            return Err(NumError::Shape {
                op: "adamw.state",
                lhs: vec![self.first.len()],
                rhs: vec![params.len()],
            });
        }
        self.step += 1;
        let AdamWConfig { weight_decay, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads[id.index()].as_ref().expect("checked above").data();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let w = params.get_mut(id).data_mut();
            for t in 0..w.len() {
                w[t] -= lr * weight_decay * w[t];
                m[t] = beta1 * m[t] + (1.0 - beta1) * g[t];
                v[t] = beta2 * v[t] + (1.0 - beta2) * g[t] * g[t];
                let mh = m[t] / bc1;
                let vh = v[t] / bc2;
                w[t] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Polynomial decay `base · (1 − step/total)^power`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub power: f64,
}

impl PolySchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        self.base_lr * (1.0 - frac).powf(self.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> (ParamStore, crate::numcore::ParamId) {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::vector(vec![w]));
        (p, id)
    }

    #[test]
    fn zero_gradient_and_decay_leave_parameters_unchanged() {
        let (mut p, id) = single(1.5);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Some(Tensor::vector(vec![0.0]))], 0.1).unwrap();
        assert_eq!(p.get(id).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut p, id) = single(1.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Some(Tensor::vector(vec![1.0]))], 0.1).unwrap();
        // m̂ = 1, v̂ = 1: w' = 1 − 0.1 · 1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get(id).item() - expected).abs() < 1e-15);
        assert!((p.get(id).item() - 0.9).abs() < 1e-8);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn descent_on_square_moves_against_gradient() {
        let (mut p, id) = single(1.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        let grad = 2.0 * p.get(id).item();
        opt.step(&mut p, &[Some(Tensor::vector(vec![grad]))], 0.1).unwrap();
        assert!(p.get(id).item() < 1.0);
    }

    #[test]
    fn weight_decay_is_decoupled_from_gradient() {
        let (mut p, id) = single(2.0);
        let cfg = AdamWConfig { weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Some(Tensor::vector(vec![0.0]))], 0.1).unwrap();
        // Only the decay term acts: 2 − 0.1·0.5·2.
        assert!((p.get(id).item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let (mut p, _) = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let err = opt.step(&mut p, &[None], 0.1).unwrap_err();
        assert_eq!(err, NumError::MissingGradient("w".into()));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn poly_schedule_decays_to_zero() {
        let s = PolySchedule { base_lr: 1e-3, total_steps: 100, power: 0.9 };
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(50) - 1e-3 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert_eq!(s.lr(100), 0.0);
        assert_eq!(s.lr(200), 0.0);
    }
}
