use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::transmitter::{EncodedContext, Tail, Transmitter};

/// Reward weights `(λ₁, λ₂, λ₃)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub language_style: f64,
    pub coherence: f64,
    pub perception: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            language_style: 0.4,
            coherence: 0.1,
            perception: 0.5,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.language_style, self.coherence, self.perception].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidArgument("reward weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Rewards of one agent turn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnReward {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub total: f64,
}

/// Mean per-token log-probability of `tokens` under `lm` with no persona and
/// no history.
pub fn reward_language_style(lm: &Transmitter, tokens: &[TokenId]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("language-style reward of an empty utterance".into()));
    }
    let layout = lm.layout(
        &EncodedContext::unconditional(),
        Tail::Response {
            tokens,
            eos: false,
            cls: false,
        },
    )?;
    let lp = lm.response_logprobs(&layout)?;
    Ok(mean(&lp))
}

/// Classifier log-probability that `response` follows `ctx`.
pub fn reward_coherence(head: &Transmitter, ctx: &EncodedContext, response: &[TokenId]) -> Result<f64> {
    let layout = head.scoring_layout(ctx, response)?;
    Ok(head.logprob_from_logit(head.nup_logit(&layout)?))
}

/// Discounted perception reward of agent turn `n` (1-based).
///
/// `agent[k-1]` is `r(a_k)`; `user[k-1]` is `r(x_k)`, where `x_1` is the
/// starter. The user's later utterances take odd powers of γ, the agent's
/// even powers.
pub fn reward_persona_perception(agent: &[f64], user: &[f64], n: usize, gamma: f64) -> Result<f64> {
    let big_n = agent.len();
    if n == 0 || n > big_n {
        return Err(Error::InvalidArgument(format!("turn {n} outside 1..={big_n}")));
    }
    if user.len() != big_n {
        return Err(Error::Shape(format!("{} user scores for {big_n} agent turns", user.len())));
    }
    let mut acc = agent[big_n - 1];
    for k in (n..big_n).rev() {
        acc = agent[k - 1] + gamma * user[k] + gamma * gamma * acc;
    }
    Ok(acc)
}

/// `λ₁r₁ + λ₂r₂ + λ₃r₃`.
pub fn total_reward(r1: f64, r2: f64, r3: f64, w: &RewardWeights) -> f64 {
    w.language_style * r1 + w.coherence * r2 + w.perception * r3
}

/// Rewards minus their mini-batch mean.
pub fn batch_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("advantages of an empty batch".into()));
    }
    let m = mean(rewards);
    Ok(rewards.iter().map(|r| r - m).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic, Vocab};
    use crate::neural::SequenceModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// The discounted sum expanded term by term.
    fn brute(agent: &[f64], user: &[f64], n: usize, gamma: f64) -> f64 {
        let mut r = agent[n - 1];
        for k in n + 1..=agent.len() {
            let d = (k - n) as i32;
            r += gamma.powi(2 * d - 1) * user[k - 1] + gamma.powi(2 * d) * agent[k - 1];
        }
        r
    }

    #[test]
    fn perception_hand_values() {
        let agent = [1.0, 0.8];
        let user = [9.9, 0.4];
        assert!((reward_persona_perception(&agent, &user, 1, 0.5).unwrap() - 1.4).abs() < 1e-12);
        assert_eq!(reward_persona_perception(&agent, &user, 2, 0.5).unwrap(), 0.8);
        assert_eq!(reward_persona_perception(&agent, &user, 1, 0.0).unwrap(), 1.0);
        assert!(reward_persona_perception(&agent, &user, 3, 0.5).is_err());
        assert!(reward_persona_perception(&agent, &user, 0, 0.5).is_err());
    }

    #[test]
    fn perception_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            for big_n in 1..=6 {
                let agent: Vec<f64> = (0..big_n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let user: Vec<f64> = (0..big_n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                for gamma in [0.0, 0.3, 0.5, 1.0] {
                    for n in 1..=big_n {
                        let d = reward_persona_perception(&agent, &user, n, gamma).unwrap() - brute(&agent, &user, n, gamma);
                        assert!(d.abs() <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn total_and_advantages() {
        let r = total_reward(-2.0, -0.5, 1.4, &RewardWeights::default());
        assert!((r + 0.15).abs() < 1e-12);
        assert_eq!(batch_advantages(&[3.7]).unwrap(), vec![0.0]);
        assert_eq!(batch_advantages(&[1.0, 0.0]).unwrap(), vec![0.5, -0.5]);
        assert!(batch_advantages(&[]).is_err());
    }

    fn lm_with_fixed_bias(logits: &[(usize, f64)], default: f64) -> Transmitter {
        let eps = generate_synthetic(4, 2, 0).unwrap();
        let vocab = build_vocab(&eps, 1).unwrap();
        let mut t = Transmitter::new(vocab.clone(), SequenceModelConfig::tiny(vocab.len(), true), 0).unwrap();
        let p = t.params_mut();
        let w = p.id("lm_head.weight").unwrap();
        p.get_mut(w).fill(0.0);
        let b = p.id("lm_head.bias").unwrap();
        p.get_mut(b).fill(default);
        for &(tok, v) in logits {
            p.get_mut(b)[[0, tok]] = v;
        }
        t
    }

    #[test]
    fn language_style_values() {
        // Token x at log-probability ln(1/2) everywhere; y at ln(1/8).
        let v = lm_with_fixed_bias(&[], 0.0).vocab().len();
        let (x, y) = (v - 1, v - 2);
        let rest = ((1.0 - 0.5 - 0.125) / (v - 2) as f64).ln();
        let lm = lm_with_fixed_bias(&[(x, 0.5f64.ln()), (y, 0.125f64.ln())], rest);
        assert!((reward_language_style(&lm, &[x]).unwrap() - 0.5f64.ln()).abs() < 1e-9);
        let two = reward_language_style(&lm, &[x, y]).unwrap();
        assert!((two - (0.5f64.ln() + 0.125f64.ln()) / 2.0).abs() < 1e-9);
        let four = reward_language_style(&lm, &[x, y, x, y]).unwrap();
        assert!((two - four).abs() < 1e-9);
        assert!(reward_language_style(&lm, &[]).is_err());
    }

    #[test]
    fn coherence_is_a_log_probability() {
        let lm = lm_with_fixed_bias(&[], 0.0);
        let ctx = EncodedContext::unconditional();
        for toks in [vec![], vec![Vocab::UNK], lm.vocab().encode("i have a dog")] {
            assert!(reward_coherence(&lm, &ctx, &toks).unwrap() <= 0.0);
        }
    }

    proptest! {
        #[test]
        fn zero_gamma_is_immediate(agent in prop::collection::vec(-3.0f64..3.0, 1..6), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let user: Vec<f64> = agent.iter().map(|_| rng.gen()).collect();
            for n in 1..=agent.len() {
                prop_assert_eq!(reward_persona_perception(&agent, &user, n, 0.0).unwrap(), agent[n - 1]);
            }
        }
    }
}
