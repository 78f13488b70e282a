use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layout::{build_layout, EncodedContext, Tail, TokenLayout};
use crate::corpus::{Persona, Speaker, TokenId, Turn, Vocab};
use crate::error::{Error, Result};
use crate::neural::{
    log_sigmoid, log_softmax, Checkpoint, Gradients, Graph, Matrix, ParamId, ParamStore,
    SequenceModel, SequenceModelConfig, Var,
};

pub const TRANSMITTER_KIND: &str = "transmitter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TransmitterConfig {
    model: SequenceModelConfig,
}

/// Per-instance losses of one joint training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointLoss {
    pub mle: f64,
    pub nup: f64,
    /// Logistic fit of the null bias; touches no other parameter.
    pub calibration: f64,
}

/// Causal transformer with a language-model head and a next-utterance
/// classifier read off the hidden state of the trailing `[CLS]`.
///
/// The classifier emits a logit `s` per (context, response). Its probability
/// of "is the next utterance" is `σ(s − b₀)`, where `b₀` is a learned null
/// bias, so a single candidate can be scored outside paired training.
#[derive(Clone, Debug)]
pub struct Transmitter {
    model: SequenceModel,
    vocab: Vocab,
    nup_weight: ParamId,
    nup_bias: ParamId,
    nup_null: ParamId,
}

impl Transmitter {
    pub fn new(vocab: Vocab, config: SequenceModelConfig, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::InvalidArgument(format!(
                "model vocab_size {} but vocabulary has {} entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        if !config.causal {
            return Err(Error::InvalidArgument("the transmitter needs a causal model".into()));
        }
        let model = SequenceModel::new(config, seed)?;
        Self::attach(model, vocab)
    }

    fn attach(mut model: SequenceModel, vocab: Vocab) -> Result<Self> {
        let d = model.config().model_dim;
        let nup_weight = model.add_param("nup.weight", Matrix::zeros((d, 1)))?;
        let nup_bias = model.add_param("nup.bias", Matrix::zeros((1, 1)))?;
        let nup_null = model.add_param("nup.null", Matrix::zeros((1, 1)))?;
        Ok(Transmitter {
            model,
            vocab,
            nup_weight,
            nup_bias,
            nup_null,
        })
    }

    /// Same architecture and vocabulary, different parameter values.
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        let model = SequenceModel::bind(self.model.config().clone(), params)?;
        Self::attach(model, self.vocab.clone())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn model(&self) -> &SequenceModel {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        self.model.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    pub fn max_positions(&self) -> usize {
        self.model.config().max_positions
    }

    pub fn context(&self, persona: &Persona, history: &[Turn], responder: Speaker) -> EncodedContext {
        EncodedContext::new(&self.vocab, persona, history, responder)
    }

    pub fn layout(&self, ctx: &EncodedContext, tail: Tail<'_>) -> Result<TokenLayout> {
        build_layout(ctx, tail, self.max_positions())
    }

    /// Text-level layout assembly. With a response the layout closes with
    /// `[EOS]`, and with `[CLS]` when `with_cls` is set.
    pub fn build_input(
        &self,
        persona: &Persona,
        history: &[Turn],
        responder: Speaker,
        response: Option<&str>,
        with_cls: bool,
    ) -> Result<TokenLayout> {
        let ctx = self.context(persona, history, responder);
        match response {
            None => self.layout(&ctx, Tail::Open { reserve: 0 }),
            Some(r) => {
                let tokens = self.vocab.encode(r);
                self.layout(
                    &ctx,
                    Tail::Response {
                        tokens: &tokens,
                        eos: true,
                        cls: with_cls,
                    },
                )
            }
        }
    }

    /// Layout scored by the classifier: response, `[EOS]`, `[CLS]`.
    pub fn scoring_layout(&self, ctx: &EncodedContext, response: &[TokenId]) -> Result<TokenLayout> {
        self.layout(
            ctx,
            Tail::Response {
                tokens: response,
                eos: true,
                cls: true,
            },
        )
    }

    fn hidden<'p>(&'p self, g: &mut Graph<'p>, layout: &TokenLayout) -> Result<Var> {
        self.model
            .hidden(g, &layout.token_ids, &layout.segment_ids, &layout.positions())
    }

    /// `picks×1` column of log-probabilities of the masked tokens.
    fn target_logprobs<'p>(&'p self, g: &mut Graph<'p>, hidden: Var, layout: &TokenLayout) -> Result<Var> {
        let targets = layout.targets();
        if targets.is_empty() {
            return Err(Error::InvalidArgument("layout has no masked-in target token".into()));
        }
        let rows: Vec<usize> = targets.iter().map(|&(r, _)| r).collect();
        let h = g.select_rows(hidden, &rows);
        let logits = self.model.lm_logits(g, h);
        let picks: Vec<(usize, usize)> = targets.iter().enumerate().map(|(k, &(_, t))| (k, t)).collect();
        Ok(g.log_softmax_pick(logits, &picks))
    }

    fn mle_term<'p>(&'p self, g: &mut Graph<'p>, hidden: Var, layout: &TokenLayout) -> Result<Var> {
        let lp = self.target_logprobs(g, hidden, layout)?;
        let mean = g.mean(lp);
        Ok(g.scale(mean, -1.0))
    }

    fn cls_logit<'p>(&'p self, g: &mut Graph<'p>, hidden: Var, layout: &TokenLayout) -> Result<Var> {
        let pos = layout
            .cls_position
            .ok_or_else(|| Error::InvalidArgument("layout has no [CLS] token".into()))?;
        let h = g.select_rows(hidden, &[pos]);
        let w = g.param(self.model.params(), self.nup_weight);
        let b = g.param(self.model.params(), self.nup_bias);
        let s = g.matmul(h, w);
        Ok(g.add(s, b))
    }

    fn nup_term<'p>(&'p self, g: &mut Graph<'p>, gold: Var, distractor: Var) -> Var {
        let pair = g.concat_cols(&[gold, distractor]);
        let lp = g.log_softmax_pick(pair, &[(0, 0)]);
        let sum = g.sum(lp);
        g.scale(sum, -1.0)
    }

    /// Mean negative log-likelihood per masked token.
    pub fn mle_loss(&self, layout: &TokenLayout) -> Result<f64> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, layout)?;
        let loss = self.mle_term(&mut g, h, layout)?;
        Ok(g.scalar(loss))
    }

    pub fn mle_loss_with_grad(&self, layout: &TokenLayout) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, layout)?;
        let loss = self.mle_term(&mut g, h, layout)?;
        let grads = g.backward(loss)?.gradients(self.params());
        Ok((g.scalar(loss), grads))
    }

    /// Per-token negative log-likelihoods of the masked tokens.
    pub fn token_nlls(&self, layout: &TokenLayout) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, layout)?;
        let lp = self.target_logprobs(&mut g, h, layout)?;
        Ok(g.value(lp).iter().map(|v| -v).collect())
    }

    /// Raw classifier logit for a layout ending in `[CLS]`.
    pub fn nup_logit(&self, layout: &TokenLayout) -> Result<f64> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, layout)?;
        let s = self.cls_logit(&mut g, h, layout)?;
        Ok(g.scalar(s))
    }

    fn null_bias(&self) -> f64 {
        self.params().get(self.nup_null)[[0, 0]]
    }

    /// `log p(y=1)` for a classifier logit.
    pub fn logprob_from_logit(&self, logit: f64) -> f64 {
        log_sigmoid(logit - self.null_bias())
    }

    /// Two-way softmax cross-entropy with the gold response as the positive.
    pub fn nup_loss(&self, gold: &TokenLayout, distractor: &TokenLayout) -> Result<f64> {
        Ok(self.nup_loss_with_grad(gold, distractor)?.0)
    }

    pub fn nup_loss_with_grad(&self, gold: &TokenLayout, distractor: &TokenLayout) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let hg = self.hidden(&mut g, gold)?;
        let sg = self.cls_logit(&mut g, hg, gold)?;
        let hd = self.hidden(&mut g, distractor)?;
        let sd = self.cls_logit(&mut g, hd, distractor)?;
        let loss = self.nup_term(&mut g, sg, sd);
        let grads = g.backward(loss)?.gradients(self.params());
        Ok((g.scalar(loss), grads))
    }

    /// `log p(y=1 | persona, history, response)`; always `<= 0`.
    pub fn nup_logprob(&self, ctx: &EncodedContext, response: &[TokenId]) -> Result<f64> {
        if response.is_empty() {
            return Err(Error::InvalidArgument("response must be non-empty".into()));
        }
        let layout = self.scoring_layout(ctx, response)?;
        Ok(self.logprob_from_logit(self.nup_logit(&layout)?))
    }

    pub fn nup_logprob_text(&self, persona: &Persona, history: &[Turn], responder: Speaker, response: &str) -> Result<f64> {
        let ctx = self.context(persona, history, responder);
        self.nup_logprob(&ctx, &self.vocab.encode(response))
    }

    /// Joint MLE + next-utterance loss with unit weights, plus the detached
    /// null-bias fit. Both layouts must end in `[CLS]`.
    pub fn joint_loss_with_grad(&self, gold: &TokenLayout, distractor: &TokenLayout) -> Result<(JointLoss, Gradients)> {
        let mut g = Graph::new();
        let hg = self.hidden(&mut g, gold)?;
        let mle = self.mle_term(&mut g, hg, gold)?;
        let sg = self.cls_logit(&mut g, hg, gold)?;
        let hd = self.hidden(&mut g, distractor)?;
        let sd = self.cls_logit(&mut g, hd, distractor)?;
        let nup = self.nup_term(&mut g, sg, sd);

        // σ(s_gold − b₀) → 1 and σ(s_distractor − b₀) → 0, logits held fixed.
        let null = g.param(self.model.params(), self.nup_null);
        let (sg_v, sd_v) = (g.value(sg).clone(), g.value(sd).clone());
        let sg_c = g.constant(sg_v);
        let sd_c = g.constant(sd_v);
        let pos = g.sub(sg_c, null);
        let neg = g.sub(null, sd_c);
        let lp_pos = g.log_sigmoid(pos);
        let lp_neg = g.log_sigmoid(neg);
        let both = g.add(lp_pos, lp_neg);
        let calibration = g.scale(both, -1.0);

        let total = g.add(mle, nup);
        let total = g.add(total, calibration);
        let grads = g.backward(total)?.gradients(self.params());
        Ok((
            JointLoss {
                mle: g.scalar(mle),
                nup: g.scalar(nup),
                calibration: g.scalar(calibration),
            },
            grads,
        ))
    }

    /// LM log-probability sum (response and `[EOS]`) and classifier
    /// log-probability of one response, from a single forward pass.
    pub fn score_response(&self, ctx: &EncodedContext, response: &[TokenId]) -> Result<(f64, f64)> {
        let layout = self.scoring_layout(ctx, response)?;
        let mut g = Graph::new();
        let h = self.hidden(&mut g, &layout)?;
        let lp = self.target_logprobs(&mut g, h, &layout)?;
        let s = self.cls_logit(&mut g, h, &layout)?;
        Ok((g.value(lp).sum(), self.logprob_from_logit(g.scalar(s))))
    }

    /// Log-distribution of the token following `layout`.
    pub fn next_token_logprobs(&self, layout: &TokenLayout) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, layout)?;
        let last = g.select_rows(h, &[layout.len() - 1]);
        let logits = self.model.lm_logits(&mut g, last);
        let row: Vec<f64> = g.value(logits).row(0).to_vec();
        Ok(log_softmax(&row))
    }

    /// Log-probabilities of the masked tokens of `layout`.
    pub fn response_logprobs(&self, layout: &TokenLayout) -> Result<Vec<f64>> {
        Ok(self.token_nlls(layout)?.into_iter().map(|v| -v).collect())
    }

    /// Sum over `(layout, weight)` of `weight · Σ log p(masked tokens)`,
    /// with its gradient. Used by the policy-gradient update.
    pub fn weighted_logprob_with_grad(
        &self,
        items: &[(TokenLayout, f64)],
    ) -> Result<(f64, Vec<Vec<f64>>, Gradients)> {
        let mut g = Graph::new();
        let mut terms = Vec::with_capacity(items.len());
        let mut per_token = Vec::with_capacity(items.len());
        for (layout, weight) in items {
            let h = self.hidden(&mut g, layout)?;
            let lp = self.target_logprobs(&mut g, h, layout)?;
            per_token.push(g.value(lp).iter().copied().collect::<Vec<f64>>());
            let s = g.sum(lp);
            terms.push(g.scale(s, *weight));
        }
        if terms.is_empty() {
            return Err(Error::InvalidArgument("no trajectories".into()));
        }
        let stacked = g.concat_rows(&terms);
        let total = g.sum(stacked);
        let grads = g.backward(total)?.gradients(self.params());
        Ok((g.scalar(total), per_token, grads))
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: TRANSMITTER_KIND.into(),
            config: serde_json::to_value(TransmitterConfig {
                model: self.model.config().clone(),
            })?,
            vocab: self.vocab.clone(),
            meta,
            params: self.params().clone(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.expect_kind(TRANSMITTER_KIND)?;
        let cfg: TransmitterConfig = serde_json::from_value(ckpt.config)?;
        if cfg.model.vocab_size != ckpt.vocab.len() {
            return Err(Error::Checkpoint("config vocab_size disagrees with vocabulary".into()));
        }
        let model = SequenceModel::bind(cfg.model, ckpt.params)?;
        Self::attach(model, ckpt.vocab)
    }

    /// Sets the classifier head directly; test and tooling hook.
    pub fn set_nup_head(&mut self, weight: Array2<f64>, bias: f64, null: f64) -> Result<()> {
        let d = self.model.config().model_dim;
        if weight.dim() != (d, 1) {
            return Err(Error::Shape(format!("nup weight must be {d}x1")));
        }
        let (w, b, n) = (self.nup_weight, self.nup_bias, self.nup_null);
        let p = self.params_mut();
        *p.get_mut(w) = weight;
        p.get_mut(b)[[0, 0]] = bias;
        p.get_mut(n)[[0, 0]] = null;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic};

    fn fixture() -> (Transmitter, Persona, Vec<Turn>) {
        let eps = generate_synthetic(4, 2, 0).unwrap();
        let vocab = build_vocab(&eps, 1).unwrap();
        let t = Transmitter::new(vocab.clone(), SequenceModelConfig::tiny(vocab.len(), true), 1).unwrap();
        (t, eps[0].persona_b.clone(), eps[0].turns[..1].to_vec())
    }

    /// Zeroes the LM head and puts bias `ln p` on chosen tokens, so the
    /// model's next-token distribution is fixed regardless of context.
    fn fixed_distribution(t: &mut Transmitter, logits: &[(usize, f64)], default: f64) {
        let p = t.params_mut();
        let w = p.id("lm_head.weight").unwrap();
        p.get_mut(w).fill(0.0);
        let b = p.id("lm_head.bias").unwrap();
        p.get_mut(b).fill(default);
        for &(tok, v) in logits {
            p.get_mut(b)[[0, tok]] = v;
        }
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let (mut t, persona, history) = fixture();
        fixed_distribution(&mut t, &[], 0.0);
        let layout = t.build_input(&persona, &history, Speaker::B, Some("i like dogs"), false).unwrap();
        let v = t.vocab().len() as f64;
        assert!((t.mle_loss(&layout).unwrap() - v.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_model_loss_is_zero() {
        let (mut t, persona, _) = fixture();
        // A single-token response whose target is always [EOS]: put all mass on EOS.
        fixed_distribution(&mut t, &[(Vocab::EOS, 0.0)], -1e9);
        let ctx = t.context(&persona, &[], Speaker::B);
        let layout = t
            .layout(&ctx, Tail::Response { tokens: &[], eos: true, cls: false })
            .unwrap();
        assert!(t.mle_loss(&layout).unwrap().abs() < 1e-12);
    }

    #[test]
    fn two_token_target_hand_evaluation() {
        // Targets are [x, EOS]; make p(x) = 1/2 and p(EOS) = 1/4 everywhere.
        let (mut t, persona, _) = fixture();
        let x = t.vocab().id("dogs");
        let v = t.vocab().len();
        // Remaining mass 1/4 spread over the other v-2 tokens.
        let rest = (0.25 / (v - 2) as f64).ln();
        fixed_distribution(&mut t, &[(x, 0.5f64.ln()), (Vocab::EOS, 0.25f64.ln())], rest);
        let ctx = t.context(&persona, &[], Speaker::B);
        let layout = t
            .layout(&ctx, Tail::Response { tokens: &[x], eos: true, cls: false })
            .unwrap();
        let expected = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((t.mle_loss(&layout).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn mle_rejects_empty_mask() {
        let (t, persona, history) = fixture();
        let open = t.build_input(&persona, &history, Speaker::B, None, false).unwrap();
        assert!(t.mle_loss(&open).is_err());
    }

    #[test]
    fn nup_loss_values() {
        let (mut t, persona, history) = fixture();
        let gold = t.build_input(&persona, &history, Speaker::B, Some("i like dogs"), true).unwrap();
        let dist = t.build_input(&persona, &history, Speaker::B, Some("my job is chef"), true).unwrap();
        let d = t.model().config().model_dim;
        // Zero weight: both logits equal the bias.
        t.set_nup_head(Array2::zeros((d, 1)), 0.3, 0.0).unwrap();
        assert!((t.nup_loss(&gold, &dist).unwrap() - 2f64.ln()).abs() < 1e-12);
        // Swapping the roles of two equal-score layouts changes nothing.
        assert!((t.nup_loss(&dist, &gold).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nup_loss_of_score_gap() {
        // Scores (2, 0) → ln(1 + e^-2).
        let (s_gold, s_dist) = (2.0f64, 0.0f64);
        let mut g = Graph::new();
        let a = g.constant(Matrix::from_elem((1, 1), s_gold));
        let b = g.constant(Matrix::from_elem((1, 1), s_dist));
        let (t, _, _) = fixture();
        let l = t.nup_term(&mut g, a, b);
        assert!((g.scalar(l) - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        let a = g.constant(Matrix::from_elem((1, 1), 60.0));
        let l = t.nup_term(&mut g, a, b);
        assert!(g.scalar(l) < 1e-20);
    }

    #[test]
    fn nup_requires_cls() {
        let (t, persona, history) = fixture();
        let no_cls = t.build_input(&persona, &history, Speaker::B, Some("hi"), false).unwrap();
        let with = t.build_input(&persona, &history, Speaker::B, Some("hi"), true).unwrap();
        assert!(t.nup_loss(&no_cls, &with).is_err());
        assert!(t.nup_logit(&no_cls).is_err());
    }

    #[test]
    fn nup_logprob_normalization_and_monotonicity() {
        let (mut t, persona, history) = fixture();
        let d = t.model().config().model_dim;
        t.set_nup_head(Array2::zeros((d, 1)), 0.0, 0.0).unwrap();
        let lp = t.nup_logprob_text(&persona, &history, Speaker::B, "i like dogs").unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-12);
        let mut prev = f64::NEG_INFINITY;
        for logit in [-5.0, -1.0, 0.0, 0.5, 3.0, 40.0] {
            let v = t.logprob_from_logit(logit);
            assert!(v > prev && v <= 0.0);
            prev = v;
        }
        assert!(t.nup_logprob(&t.context(&persona, &history, Speaker::B), &[]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (t, persona, history) = fixture();
        let layout = t.build_input(&persona, &history, Speaker::B, Some("i like dogs"), true).unwrap();
        let back = Transmitter::from_checkpoint(
            Checkpoint::from_bytes(&t.to_checkpoint(serde_json::json!({})).unwrap().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(t.mle_loss(&layout).unwrap(), back.mle_loss(&layout).unwrap());
        assert_eq!(t.nup_logit(&layout).unwrap(), back.nup_logit(&layout).unwrap());
    }
}
