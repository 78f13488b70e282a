use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Matrix, ParamStore};
use crate::error::{Error, Result};

/// Adam hyperparameters. Betas and epsilon default to the usual
/// `(0.9, 0.999, 1e-8)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Supervised training of both models.
    pub fn supervised() -> Self {
        Self::with_lr(6.25e-5)
    }

    /// Self-play fine-tuning of the agent.
    pub fn self_play() -> Self {
        Self::with_lr(1e-6)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::supervised()
    }
}

/// Adam with bias correction; moment buffers are aligned with one store.
#[derive(Clone, Debug)]
pub struct Adam {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Matrix> = store.iter().map(|(_, _, p)| Matrix::zeros(p.raw_dim())).collect();
        Ok(Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One descent step on `store` along `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || store.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters ({} optimizer slots)",
                grads.len(),
                store.len(),
                self.m.len()
            )));
        }
        for ((id, name, p), g) in store.iter().zip(grads.tensors()) {
            if p.dim() != g.dim() {
                return Err(Error::Shape(format!(
                    "gradient for '{name}' is {:?}, parameter is {:?}",
                    g.dim(),
                    p.dim()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of '{name}'")));
            }
            debug_assert_eq!(self.m[id.0].dim(), p.dim());
        }

        self.step += 1;
        let OptimizerConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = &grads.tensors()[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", array![[v]]);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(0.7);
        let mut opt = Adam::new(OptimizerConfig::with_lr(0.1), &s).unwrap();
        let g = Gradients::zeros_like(&s);
        for _ in 0..5 {
            opt.step(&mut s, &g).unwrap();
        }
        assert_eq!(s, store(0.7));
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn first_step_of_unit_gradient() {
        // t=1: m̂ = g = 1, v̂ = g² = 1, so Δ = -lr / (1 + ε).
        let lr = 1e-3;
        let mut s = store(0.0);
        let mut opt = Adam::new(OptimizerConfig::with_lr(lr), &s).unwrap();
        let g = Gradients::from_tensors(vec![array![[1.0]]]);
        opt.step(&mut s, &g).unwrap();
        let id = s.id("w").unwrap();
        let expected = -lr * (1.0 / (1.0 + 1e-8));
        assert!((s.get(id)[[0, 0]] - expected).abs() < 1e-18);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let (mut a, mut b) = (store(0.3), store(0.3));
        let mut oa = Adam::new(OptimizerConfig::with_lr(0.01), &a).unwrap();
        let mut ob = Adam::new(OptimizerConfig::with_lr(0.01), &b).unwrap();
        let g = Gradients::from_tensors(vec![array![[-0.4]]]);
        for _ in 0..3 {
            oa.step(&mut a, &g).unwrap();
            ob.step(&mut b, &g).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut s = store(0.0);
        let mut opt = Adam::new(OptimizerConfig::with_lr(0.1), &s).unwrap();
        let g = Gradients::from_tensors(vec![array![[1.0, 2.0]]]);
        assert!(matches!(opt.step(&mut s, &g), Err(Error::Shape(_))));
        let g = Gradients::from_tensors(vec![]);
        assert!(opt.step(&mut s, &g).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let s = store(0.0);
        assert!(Adam::new(OptimizerConfig::with_lr(0.0), &s).is_err());
        assert!(Adam::new(OptimizerConfig::with_lr(-1.0), &s).is_err());
        assert_eq!(OptimizerConfig::supervised().learning_rate, 6.25e-5);
        assert_eq!(OptimizerConfig::self_play().learning_rate, 1e-6);
    }
}
