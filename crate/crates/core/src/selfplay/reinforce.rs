use rand::Rng;

use crate::error::{Error, Result};
use crate::neural::{log_softmax, Adam, Gradients, Graph, Matrix, ParamId, ParamStore};
use crate::transmitter::{draw, TokenLayout, Transmitter};

/// Stored log-probabilities must reproduce within this tolerance.
pub const LOGPROB_TOLERANCE: f64 = 1e-6;

/// A parametric policy whose actions can be re-scored with gradients.
pub trait Policy {
    type Action;

    /// `Σ weight · Σ log π(action)`, per-step log-probabilities of every
    /// action, and the gradient of the sum.
    fn weighted_logprob_with_grad(&self, items: &[(Self::Action, f64)]) -> Result<(f64, Vec<Vec<f64>>, Gradients)>;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Policy for Transmitter {
    type Action = TokenLayout;

    fn weighted_logprob_with_grad(&self, items: &[(TokenLayout, f64)]) -> Result<(f64, Vec<Vec<f64>>, Gradients)> {
        Transmitter::weighted_logprob_with_grad(self, items)
    }

    fn params(&self) -> &ParamStore {
        Transmitter::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        Transmitter::params_mut(self)
    }
}

/// Ascent direction `Σ_turns advantage · Σ_tokens ∇log π(token)`.
///
/// `stored[i]` holds the log-probabilities recorded when action `i` was
/// sampled; they must match the current parameters.
pub fn policy_gradient<P: Policy>(
    policy: &P,
    actions: &[(P::Action, f64)],
    stored: &[Vec<f64>],
) -> Result<Gradients> {
    if actions.len() != stored.len() {
        return Err(Error::Shape(format!(
            "{} actions but {} stored log-probability lists",
            actions.len(),
            stored.len()
        )));
    }
    let (_, fresh, grads) = policy.weighted_logprob_with_grad(actions)?;
    for (i, (now, then)) in fresh.iter().zip(stored).enumerate() {
        if now.len() != then.len() {
            return Err(Error::Shape(format!(
                "action {i}: {} re-scored tokens, {} stored",
                now.len(),
                then.len()
            )));
        }
        if let Some((a, b)) = now.iter().zip(then).find(|(a, b)| (*a - *b).abs() > LOGPROB_TOLERANCE) {
            return Err(Error::InvalidArgument(format!(
                "action {i}: stored log-probability {b} is stale (now {a})"
            )));
        }
    }
    Ok(grads)
}

/// One Adam step ascending the policy gradient.
pub fn reinforce_step<P: Policy>(
    policy: &mut P,
    adam: &mut Adam,
    actions: &[(P::Action, f64)],
    stored: &[Vec<f64>],
) -> Result<()> {
    if actions.iter().all(|(_, adv)| *adv == 0.0) {
        return Ok(());
    }
    let mut grads = policy_gradient(policy, actions, stored)?;
    grads.scale(-1.0);
    adam.step(policy.params_mut(), &grads)
}

/// Softmax policy over the arms of a bandit, one logit per arm. Each action
/// is a single pulled arm.
#[derive(Clone, Debug)]
pub struct SoftmaxBandit {
    store: ParamStore,
    logits: ParamId,
}

impl SoftmaxBandit {
    pub fn new(logits: &[f64]) -> Self {
        let mut store = ParamStore::new();
        let logits = store.add("logits", Matrix::from_shape_vec((1, logits.len()), logits.to_vec()).expect("row"));
        SoftmaxBandit { store, logits }
    }

    pub fn probs(&self) -> Vec<f64> {
        let row = self.store.get(self.logits).row(0).to_vec();
        log_softmax(&row).iter().map(|l| l.exp()).collect()
    }

    /// Samples an arm; returns it with its log-probability.
    pub fn pull<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, f64)> {
        let row = self.store.get(self.logits).row(0).to_vec();
        let lp = log_softmax(&row);
        let arm = draw(&lp, rng)?;
        Ok((arm, lp[arm]))
    }

    /// Exact `∇ E[r] = Σ_a π_a r_a (e_a − π)` for per-arm rewards.
    pub fn analytic_gradient(&self, rewards: &[f64]) -> Vec<f64> {
        let p = self.probs();
        (0..p.len())
            .map(|j| (0..p.len()).map(|a| p[a] * rewards[a] * ((a == j) as u8 as f64 - p[j])).sum())
            .collect()
    }

    /// The logit component of a gradient over this policy's store.
    pub fn logit_gradient(&self, grads: &Gradients) -> Vec<f64> {
        grads.get(self.logits).row(0).to_vec()
    }
}

impl Policy for SoftmaxBandit {
    type Action = usize;

    fn weighted_logprob_with_grad(&self, items: &[(usize, f64)]) -> Result<(f64, Vec<Vec<f64>>, Gradients)> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("no actions".into()));
        }
        let mut g = Graph::new();
        let l = g.param(&self.store, self.logits);
        let picks: Vec<(usize, usize)> = items.iter().map(|(a, _)| (0, *a)).collect();
        let lp = g.log_softmax_pick(l, &picks);
        let per: Vec<Vec<f64>> = g.value(lp).iter().map(|v| vec![*v]).collect();
        let w = g.constant(Matrix::from_shape_fn((items.len(), 1), |(i, _)| items[i].1));
        let weighted = g.mul(lp, w);
        let total = g.sum(weighted);
        let grads = g.backward(total)?.gradients(&self.store);
        Ok((g.scalar(total), per, grads))
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::OptimizerConfig;
    use crate::selfplay::batch_advantages;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const REWARD: [f64; 2] = [1.0, 0.0];

    /// Per-sample estimates over `n` batches, each advantage computed by `adv`.
    fn estimates(bandit: &SoftmaxBandit, n: usize, batch: usize, adv: impl Fn(&[f64]) -> Vec<f64>, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let pulls: Vec<(usize, f64)> = (0..batch).map(|_| bandit.pull(&mut rng).unwrap()).collect();
            let rewards: Vec<f64> = pulls.iter().map(|(a, _)| REWARD[*a]).collect();
            let advs = adv(&rewards);
            let actions: Vec<(usize, f64)> = pulls.iter().zip(&advs).map(|((a, _), d)| (*a, *d)).collect();
            let stored: Vec<Vec<f64>> = pulls.iter().map(|(_, l)| vec![*l]).collect();
            let g = policy_gradient(bandit, &actions, &stored).unwrap();
            let t = bandit.logit_gradient(&g);
            out.push([t[0] / batch as f64, t[1] / batch as f64]);
        }
        out
    }

    fn assert_within_3_sigma(samples: &[Vec<[f64; 2]>], expected: &[f64]) {
        for est in samples {
            for j in 0..2 {
                let n = est.len() as f64;
                let mean = est.iter().map(|e| e[j]).sum::<f64>() / n;
                let var = est.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let se = (var / n).sqrt();
                assert!((mean - expected[j]).abs() <= 3.0 * se, "component {j}: {mean} vs {} (se {se})", expected[j]);
            }
        }
    }

    #[test]
    fn bandit_estimator_is_unbiased() {
        let bandit = SoftmaxBandit::new(&[0.3, -0.2]);
        let truth = bandit.analytic_gradient(&REWARD);
        let plain = estimates(&bandit, 10_000, 1, |r| r.to_vec(), 1);
        let constant = estimates(&bandit, 10_000, 1, |r| r.iter().map(|x| x - 0.5).collect(), 2);
        assert_within_3_sigma(&[plain, constant], &truth);
    }

    #[test]
    fn batch_mean_baseline_keeps_direction() {
        // Subtracting a mean that includes the sample's own reward scales the
        // expected gradient by (B−1)/B.
        let bandit = SoftmaxBandit::new(&[0.3, -0.2]);
        let truth = bandit.analytic_gradient(&REWARD);
        let b = 8;
        let est = estimates(&bandit, 10_000 / b, b, |r| batch_advantages(r).unwrap(), 3);
        let f = (b as f64 - 1.0) / b as f64;
        assert_within_3_sigma(&[est], &[truth[0] * f, truth[1] * f]);
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let mut bandit = SoftmaxBandit::new(&[0.0, 0.0]);
        let mut adam = Adam::new(OptimizerConfig::with_lr(0.1), &bandit.store).unwrap();
        let before = bandit.probs()[1];
        reinforce_step(&mut bandit, &mut adam, &[(1, 1.0)], &[vec![before.ln()]]).unwrap();
        assert!(bandit.probs()[1] > before);

        let p = bandit.probs()[0];
        reinforce_step(&mut bandit, &mut adam, &[(0, -1.0)], &[vec![p.ln()]]).unwrap();
        assert!(bandit.probs()[0] < p);
    }

    #[test]
    fn zero_advantages_leave_parameters() {
        let mut bandit = SoftmaxBandit::new(&[0.4, 0.1]);
        let mut adam = Adam::new(OptimizerConfig::with_lr(0.1), &bandit.store).unwrap();
        let before = bandit.probs();
        reinforce_step(&mut bandit, &mut adam, &[(0, 0.0), (1, 0.0)], &[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(bandit.probs(), before);
    }

    #[test]
    fn stale_or_mismatched_logprobs_rejected() {
        let bandit = SoftmaxBandit::new(&[0.0, 0.0]);
        let half = 0.5f64.ln();
        assert!(policy_gradient(&bandit, &[(0, 1.0)], &[vec![half]]).is_ok());
        assert!(policy_gradient(&bandit, &[(0, 1.0)], &[vec![half + 1e-3]]).is_err());
        assert!(policy_gradient(&bandit, &[(0, 1.0)], &[]).is_err());
        assert!(policy_gradient(&bandit, &[(0, 1.0)], &[vec![half, half]]).is_err());
    }
}
