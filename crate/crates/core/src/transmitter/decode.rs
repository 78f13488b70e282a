use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::{EncodedContext, Tail, TokenLayout};
use super::model::Transmitter;
use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    BeamRank,
    Multinomial,
}

/// How candidates are ordered when several are scored against one context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// `α·lm/len + (1−α)·nup`.
    #[default]
    Combined,
    ClassifierOnly,
    LmOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub beam_size: usize,
    pub max_steps: usize,
    pub alpha: f64,
    pub mode: DecodeMode,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            beam_size: 2,
            max_steps: 32,
            alpha: 0.1,
            mode: DecodeMode::BeamRank,
        }
    }
}

impl DecodeParams {
    pub fn multinomial() -> Self {
        DecodeParams {
            mode: DecodeMode::Multinomial,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::InvalidArgument("beam_size must be >= 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    fn expect(&self, mode: DecodeMode) -> Result<()> {
        self.validate()?;
        if self.mode != mode {
            return Err(Error::InvalidArgument(format!("decode mode {:?}, expected {mode:?}", self.mode)));
        }
        Ok(())
    }
}

/// One finished (or step-capped) beam hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    /// Generated tokens, `[EOS]` excluded.
    pub tokens: Vec<TokenId>,
    pub text: String,
    /// Sum of token log-probabilities including `[EOS]` when emitted.
    pub lm_logprob: f64,
    /// Generated token count including `[EOS]` when emitted.
    pub length: usize,
    pub finished: bool,
    pub nup_logprob: f64,
    pub score: f64,
}

impl ScoredCandidate {
    pub fn normalized_lm(&self) -> f64 {
        self.lm_logprob / self.length.max(1) as f64
    }

    pub fn rank_score(&self, alpha: f64, mode: RankMode) -> f64 {
        match mode {
            RankMode::Combined => combined_score(self.lm_logprob, self.length, self.nup_logprob, alpha),
            RankMode::ClassifierOnly => self.nup_logprob,
            RankMode::LmOnly => self.normalized_lm(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamOutput {
    pub candidates: Vec<ScoredCandidate>,
    pub selected: usize,
}

impl BeamOutput {
    pub fn best(&self) -> &ScoredCandidate {
        &self.candidates[self.selected]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<TokenId>,
    /// Log-probability of each sampled token, `[EOS]` last when `finished`.
    pub logprobs: Vec<f64>,
    pub finished: bool,
    /// Decoding cap the sample was drawn under; fixes the history truncation.
    pub max_steps: usize,
}

impl Sample {
    /// Tokens whose log-probabilities are stored, `[EOS]` included.
    pub fn scored_tokens(&self) -> Vec<TokenId> {
        let mut t = self.tokens.clone();
        if self.finished {
            t.push(Vocab::EOS);
        }
        t
    }
}

pub fn combined_score(lm_logprob: f64, length: usize, nup_logprob: f64, alpha: f64) -> f64 {
    alpha * lm_logprob / length.max(1) as f64 + (1.0 - alpha) * nup_logprob
}

/// Index of the maximum; the earliest wins ties.
pub fn argmax_stable(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn select_candidate(candidates: &[ScoredCandidate], alpha: f64, mode: RankMode) -> Option<usize> {
    let scores: Vec<f64> = candidates.iter().map(|c| c.rank_score(alpha, mode)).collect();
    argmax_stable(&scores)
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    logprob: f64,
}

impl Transmitter {
    /// Open layout with room for `max_steps` tokens plus `[EOS]` and `[CLS]`.
    fn decoding_layout(&self, ctx: &EncodedContext, max_steps: usize) -> Result<TokenLayout> {
        self.layout(ctx, Tail::Open { reserve: max_steps + 2 })
    }

    fn extend(base: &TokenLayout, tokens: &[TokenId]) -> TokenLayout {
        let mut l = base.clone();
        for &t in tokens {
            l.push_response_token(t);
        }
        l
    }

    pub fn decode_greedy(&self, ctx: &EncodedContext, max_steps: usize) -> Result<Vec<TokenId>> {
        let base = self.decoding_layout(ctx, max_steps)?;
        let mut tokens = Vec::new();
        for _ in 0..max_steps {
            let lp = self.next_token_logprobs(&Self::extend(&base, &tokens))?;
            let next = argmax_stable(&lp).expect("non-empty vocabulary");
            if next == Vocab::EOS {
                break;
            }
            tokens.push(next);
        }
        Ok(tokens)
    }

    /// Beam search; every hypothesis reaching `[EOS]` becomes a candidate
    /// until `beam_size` are finished or `max_steps` is reached, then all
    /// candidates are ranked by the combined score.
    pub fn decode_beam(&self, ctx: &EncodedContext, params: &DecodeParams) -> Result<BeamOutput> {
        self.decode_beam_ranked(ctx, params, RankMode::Combined)
    }

    pub fn decode_beam_ranked(&self, ctx: &EncodedContext, params: &DecodeParams, mode: RankMode) -> Result<BeamOutput> {
        params.expect(DecodeMode::BeamRank)?;
        let base = self.decoding_layout(ctx, params.max_steps)?;
        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for _ in 0..params.max_steps {
            let mut expansions: Vec<(f64, usize, TokenId)> = Vec::new();
            for (h, hyp) in live.iter().enumerate() {
                let lp = self.next_token_logprobs(&Self::extend(&base, &hyp.tokens))?;
                expansions.extend(lp.iter().enumerate().map(|(tok, &l)| (hyp.logprob + l, h, tok)));
            }
            // Stable: equal scores keep (hypothesis, token) order.
            expansions.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut next = Vec::with_capacity(params.beam_size);
            for &(score, h, tok) in expansions.iter().take(params.beam_size) {
                let mut tokens = live[h].tokens.clone();
                if tok == Vocab::EOS {
                    finished.push(Hypothesis { tokens, logprob: score });
                } else {
                    tokens.push(tok);
                    next.push(Hypothesis { tokens, logprob: score });
                }
            }
            live = next;
            if finished.len() >= params.beam_size || live.is_empty() {
                break;
            }
        }
        let mut candidates = Vec::new();
        for (hyp, done) in finished
            .into_iter()
            .map(|h| (h, true))
            .chain(live.into_iter().map(|h| (h, false)))
        {
            let layout = self.scoring_layout(ctx, &hyp.tokens)?;
            let nup = self.logprob_from_logit(self.nup_logit(&layout)?);
            let length = hyp.tokens.len() + done as usize;
            candidates.push(ScoredCandidate {
                text: self.vocab().decode(&hyp.tokens),
                score: combined_score(hyp.logprob, length, nup, params.alpha),
                tokens: hyp.tokens,
                lm_logprob: hyp.logprob,
                length,
                finished: done,
                nup_logprob: nup,
            });
        }
        let selected = select_candidate(&candidates, params.alpha, mode).expect("beam yields at least one candidate");
        Ok(BeamOutput { candidates, selected })
    }

    /// Scores a fixed response as a finished candidate.
    pub fn score_candidate(&self, ctx: &EncodedContext, tokens: &[TokenId], alpha: f64) -> Result<ScoredCandidate> {
        let (lm, nup) = self.score_response(ctx, tokens)?;
        let length = tokens.len() + 1;
        Ok(ScoredCandidate {
            tokens: tokens.to_vec(),
            text: self.vocab().decode(tokens),
            lm_logprob: lm,
            length,
            finished: true,
            nup_logprob: nup,
            score: combined_score(lm, length, nup, alpha),
        })
    }

    /// Draws tokens from the full next-token distribution until `[EOS]` or
    /// `max_steps` tokens.
    pub fn sample_multinomial<R: Rng + ?Sized>(
        &self,
        ctx: &EncodedContext,
        params: &DecodeParams,
        rng: &mut R,
    ) -> Result<Sample> {
        params.expect(DecodeMode::Multinomial)?;
        let base = self.decoding_layout(ctx, params.max_steps)?;
        let mut sample = Sample {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            finished: false,
            max_steps: params.max_steps,
        };
        for _ in 0..params.max_steps {
            let lp = self.next_token_logprobs(&Self::extend(&base, &sample.tokens))?;
            let tok = draw(&lp, rng)?;
            sample.logprobs.push(lp[tok]);
            if tok == Vocab::EOS {
                sample.finished = true;
                break;
            }
            sample.tokens.push(tok);
        }
        Ok(sample)
    }

    /// Teacher-forced layout of a sample, truncated exactly as during
    /// sampling, for re-evaluating its log-probabilities.
    pub fn sample_layout(&self, ctx: &EncodedContext, sample: &Sample) -> Result<TokenLayout> {
        let base = self.decoding_layout(ctx, sample.max_steps)?;
        Ok(Self::extend(&base, &sample.scored_tokens()))
    }
}

/// Draws an index from a log-distribution.
pub fn draw<R: Rng + ?Sized>(logprobs: &[f64], rng: &mut R) -> Result<usize> {
    let weights: Vec<f64> = logprobs.iter().map(|l| l.exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
    Ok(dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic};
    use crate::neural::SequenceModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cand(lm_per_token: f64, length: usize, nup: f64) -> ScoredCandidate {
        ScoredCandidate {
            tokens: vec![7; length],
            text: String::new(),
            lm_logprob: lm_per_token * length as f64,
            length,
            finished: true,
            nup_logprob: nup,
            score: 0.0,
        }
    }

    fn transmitter() -> (Transmitter, EncodedContext) {
        let eps = generate_synthetic(4, 2, 0).unwrap();
        let vocab = build_vocab(&eps, 1).unwrap();
        let t = Transmitter::new(vocab.clone(), SequenceModelConfig::tiny(vocab.len(), true), 3).unwrap();
        let ctx = t.context(&eps[0].persona_b, &eps[0].turns[..1], eps[0].turns[0].speaker.other());
        (t, ctx)
    }

    #[test]
    fn length_normalization_prefers_higher_per_token() {
        let c = [cand(-2.0, 2, 0.0), cand(-1.0, 5, 0.0)];
        assert_eq!(select_candidate(&c, 1.0, RankMode::Combined), Some(1));
        // Doubling length at the same per-token profile leaves the score unchanged.
        let a = cand(-1.3, 3, -0.2);
        let b = cand(-1.3, 6, -0.2);
        assert!((a.rank_score(1.0, RankMode::Combined) - b.rank_score(1.0, RankMode::Combined)).abs() < 1e-12);
    }

    #[test]
    fn combined_score_hand_values() {
        let a = cand(-1.0, 4, -0.1);
        let b = cand(-0.5, 4, -1.5);
        let sa = a.rank_score(0.1, RankMode::Combined);
        let sb = b.rank_score(0.1, RankMode::Combined);
        assert!((sa + 0.19).abs() < 1e-12);
        assert!((sb + 1.4).abs() < 1e-12);
        assert_eq!(select_candidate(&[a.clone(), b.clone()], 0.1, RankMode::Combined), Some(0));
        assert_eq!(select_candidate(&[a, b], 0.1, RankMode::LmOnly), Some(1));
    }

    #[test]
    fn ties_pick_first() {
        assert_eq!(argmax_stable(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax_stable(&[]), None);
        let c = [cand(-1.0, 2, -0.5), cand(-1.0, 2, -0.5)];
        assert_eq!(select_candidate(&c, 0.1, RankMode::Combined), Some(0));
    }

    #[test]
    fn params_validation() {
        assert!(DecodeParams::default().validate().is_ok());
        assert!(DecodeParams { beam_size: 0, ..Default::default() }.validate().is_err());
        assert!(DecodeParams { alpha: 1.5, ..Default::default() }.validate().is_err());
        let (t, ctx) = transmitter();
        assert!(t.decode_beam(&ctx, &DecodeParams::multinomial()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(t.sample_multinomial(&ctx, &DecodeParams::default(), &mut rng).is_err());
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let (t, ctx) = transmitter();
        let params = DecodeParams {
            beam_size: 1,
            max_steps: 8,
            ..Default::default()
        };
        let out = t.decode_beam(&ctx, &params).unwrap();
        assert_eq!(out.candidates.len(), 1);
        assert_eq!(out.best().tokens, t.decode_greedy(&ctx, 8).unwrap());
    }

    #[test]
    fn beam_candidates_recompute() {
        let (t, ctx) = transmitter();
        let params = DecodeParams {
            max_steps: 6,
            ..Default::default()
        };
        let out = t.decode_beam(&ctx, &params).unwrap();
        assert!(!out.candidates.is_empty());
        for c in &out.candidates {
            assert!((c.score - combined_score(c.lm_logprob, c.length, c.nup_logprob, 0.1)).abs() < 1e-12);
            assert!(c.nup_logprob <= 0.0);
            assert!(c.length <= 6 + 1);
            let layout = t
                .layout(&ctx, Tail::Response { tokens: &c.tokens, eos: c.finished, cls: false })
                .unwrap();
            if c.length > 0 {
                let lp: f64 = t.response_logprobs(&layout).unwrap().iter().sum();
                assert!((lp - c.lm_logprob).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fixed_candidate_scores_agree_with_parts() {
        let (t, ctx) = transmitter();
        let toks = t.vocab().encode("i like dogs");
        let c = t.score_candidate(&ctx, &toks, 0.1).unwrap();
        assert_eq!(c.length, 4);
        assert!((c.nup_logprob - t.nup_logprob(&ctx, &toks).unwrap()).abs() < 1e-12);
        let layout = t.layout(&ctx, Tail::Response { tokens: &toks, eos: true, cls: false }).unwrap();
        let nll: f64 = t.token_nlls(&layout).unwrap().iter().sum();
        assert!((c.lm_logprob + nll).abs() < 1e-9);
    }

    #[test]
    fn sample_logprobs_match_reevaluation() {
        let (t, ctx) = transmitter();
        let params = DecodeParams {
            max_steps: 10,
            ..DecodeParams::multinomial()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let s = t.sample_multinomial(&ctx, &params, &mut rng).unwrap();
            assert_eq!(s.logprobs.len(), s.tokens.len() + s.finished as usize);
            let re = t.response_logprobs(&t.sample_layout(&ctx, &s).unwrap()).unwrap();
            for (a, b) in s.logprobs.iter().zip(&re) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let a = t.sample_multinomial(&ctx, &params, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = t.sample_multinomial(&ctx, &params, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_hot_sampling_is_greedy() {
        let (mut t, ctx) = transmitter();
        let x = t.vocab().id("i");
        // Always emit `x`: sampling cannot deviate from the argmax.
        let p = t.params_mut();
        let w = p.id("lm_head.weight").unwrap();
        p.get_mut(w).fill(0.0);
        let b = p.id("lm_head.bias").unwrap();
        p.get_mut(b).fill(-1e4);
        p.get_mut(b)[[0, x]] = 0.0;
        let params = DecodeParams {
            max_steps: 5,
            ..DecodeParams::multinomial()
        };
        let s = t.sample_multinomial(&ctx, &params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.tokens, t.decode_greedy(&ctx, 5).unwrap());
        assert_eq!(s.tokens, vec![x; 5]);
        assert!(!s.finished);
    }

    #[test]
    fn draw_frequencies_within_three_sigma() {
        let lp = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[draw(&lp, &mut rng).unwrap()] += 1;
        }
        for (k, p) in [0.5, 0.3, 0.2].into_iter().enumerate() {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((counts[k] as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }
}
