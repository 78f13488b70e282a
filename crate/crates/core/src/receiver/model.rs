use serde::{Deserialize, Serialize};

use super::scoring::{agg, cumulative_score, cumulative_score_node, relevance_matrix, ReceiverLossParams};
use crate::corpus::{Persona, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::neural::{Checkpoint, Gradients, Graph, Matrix, ParamStore, SequenceModel, SequenceModelConfig, Var};

pub const RECEIVER_KIND: &str = "receiver";
const IMPRESSION_PREFIX: &str = "impression.";
const PERSONA_PREFIX: &str = "persona.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverConfig {
    pub encoder: SequenceModelConfig,
    pub loss: ReceiverLossParams,
}

impl ReceiverConfig {
    pub fn new(encoder: SequenceModelConfig) -> Self {
        ReceiverConfig {
            encoder: SequenceModelConfig { causal: false, ..encoder },
            loss: ReceiverLossParams::default(),
        }
    }
}

/// Loss parts of one (impression, real persona, distractor persona) triple.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReceiverLoss {
    pub loss: f64,
    pub c_real: f64,
    pub c_distractor: f64,
    pub l1: f64,
}

/// Gradients of both encoders.
#[derive(Clone, Debug)]
pub struct ReceiverGrads {
    pub impression: Gradients,
    pub persona: Gradients,
}

impl ReceiverGrads {
    pub fn zeros_like(r: &Receiver) -> Self {
        ReceiverGrads {
            impression: Gradients::zeros_like(r.impression.params()),
            persona: Gradients::zeros_like(r.persona.params()),
        }
    }

    pub fn accumulate(&mut self, other: &ReceiverGrads) {
        self.impression.accumulate(&other.impression);
        self.persona.accumulate(&other.persona);
    }

    pub fn scale(&mut self, f: f64) {
        self.impression.scale(f);
        self.persona.scale(f);
    }

    /// Aligned with [`Receiver::merged_params`].
    pub fn merged(&self) -> Gradients {
        let mut t = self.impression.tensors().to_vec();
        t.extend(self.persona.tensors().iter().cloned());
        Gradients::from_tensors(t)
    }
}

/// Dual bidirectional encoders scoring how well utterances reveal a persona.
#[derive(Clone, Debug)]
pub struct Receiver {
    config: ReceiverConfig,
    vocab: Vocab,
    impression: SequenceModel,
    persona: SequenceModel,
}

impl Receiver {
    pub fn new(vocab: Vocab, config: ReceiverConfig, seed: u64) -> Result<Self> {
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::InvalidArgument(format!(
                "encoder vocab_size {} but vocabulary has {} entries",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        if config.encoder.causal {
            return Err(Error::InvalidArgument("receiver encoders are bidirectional".into()));
        }
        config.loss.validate()?;
        let impression = SequenceModel::new(config.encoder.clone(), seed)?;
        let persona = SequenceModel::new(config.encoder.clone(), seed.wrapping_add(0x9e37_79b9))?;
        Ok(Receiver {
            config,
            vocab,
            impression,
            persona,
        })
    }

    pub fn config(&self) -> &ReceiverConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.model_dim
    }

    pub fn inference_tau(&self) -> f64 {
        self.config.loss.inference_tau()
    }

    pub fn impression_params_mut(&mut self) -> &mut ParamStore {
        self.impression.params_mut()
    }

    pub fn persona_params_mut(&mut self) -> &mut ParamStore {
        self.persona.params_mut()
    }

    pub fn impression_params(&self) -> &ParamStore {
        self.impression.params()
    }

    pub fn persona_params(&self) -> &ParamStore {
        self.persona.params()
    }

    /// Both encoders' parameters in one store, names prefixed by encoder.
    pub fn merged_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (prefix, model) in [(IMPRESSION_PREFIX, &self.impression), (PERSONA_PREFIX, &self.persona)] {
            for (_, name, value) in model.params().iter() {
                store.add(format!("{prefix}{name}"), value.clone());
            }
        }
        store
    }

    /// Rebuilds from a store laid out like [`Receiver::merged_params`].
    pub fn with_merged_params(&self, merged: &ParamStore) -> Result<Self> {
        Self::from_parts(self.config.clone(), self.vocab.clone(), merged)
    }

    fn from_parts(config: ReceiverConfig, vocab: Vocab, merged: &ParamStore) -> Result<Self> {
        let split = |prefix: &str| {
            let mut store = ParamStore::new();
            for (_, name, value) in merged.iter() {
                if let Some(rest) = name.strip_prefix(prefix) {
                    store.add(rest, value.clone());
                }
            }
            store
        };
        let impression = SequenceModel::bind(config.encoder.clone(), split(IMPRESSION_PREFIX))?;
        let persona = SequenceModel::bind(config.encoder.clone(), split(PERSONA_PREFIX))?;
        Ok(Receiver {
            config,
            vocab,
            impression,
            persona,
        })
    }

    fn encode_tokens(&self, text: &str) -> Result<Vec<TokenId>> {
        let tokens = self.vocab.encode(text);
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(format!("empty sentence {text:?}")));
        }
        let max = self.config.encoder.max_positions;
        if tokens.len() > max {
            return Err(Error::TooLong { len: tokens.len(), max });
        }
        Ok(tokens)
    }

    fn encode_node<'p, S: AsRef<str>>(
        &self,
        g: &mut Graph<'p>,
        model: &'p SequenceModel,
        sentences: &[S],
    ) -> Result<Var> {
        if sentences.is_empty() {
            return Err(Error::InvalidArgument("no sentences to encode".into()));
        }
        let mut rows = Vec::with_capacity(sentences.len());
        for s in sentences {
            let tokens = self.encode_tokens(s.as_ref())?;
            let n = tokens.len();
            let h = model.hidden(g, &tokens, &vec![0; n], &(0..n).collect::<Vec<_>>())?;
            rows.push(g.mean_rows(h));
        }
        Ok(g.concat_rows(&rows))
    }

    /// `N×d` mean-pooled utterance encodings.
    pub fn encode_impression<S: AsRef<str>>(&self, utterances: &[S]) -> Result<Matrix> {
        let mut g = Graph::new();
        let h = self.encode_node(&mut g, &self.impression, utterances)?;
        Ok(g.value(h).clone())
    }

    /// `L×d` mean-pooled profile encodings.
    pub fn encode_persona(&self, persona: &Persona) -> Result<Matrix> {
        let mut g = Graph::new();
        let w = self.encode_node(&mut g, &self.persona, &persona.profiles)?;
        Ok(g.value(w).clone())
    }

    /// `U = H·Wᵀ/√d` for utterances against a persona.
    pub fn relevance<S: AsRef<str>>(&self, utterances: &[S], persona: &Persona) -> Result<Matrix> {
        relevance_matrix(&self.encode_impression(utterances)?, &self.encode_persona(persona)?)
    }

    /// Cumulative score of a persona given utterances, at the inference temperature.
    pub fn persona_score<S: AsRef<str>>(&self, utterances: &[S], persona: &Persona) -> Result<f64> {
        cumulative_score(&self.relevance(utterances, persona)?, self.inference_tau())
    }

    /// Score of each profile sentence: `agg` down its column of `U`.
    pub fn profile_scores<S: AsRef<str>>(&self, utterances: &[S], persona: &Persona) -> Result<Vec<f64>> {
        let u = self.relevance(utterances, persona)?;
        let tau = self.inference_tau();
        u.columns().into_iter().map(|c| agg(&c.to_vec(), tau)).collect()
    }

    /// Cumulative score of every candidate persona and the `agg` score of each
    /// of its profile sentences, encoding the utterances once.
    pub fn candidate_scores<S: AsRef<str>>(&self, utterances: &[S], personas: &[Persona]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let h = self.encode_impression(utterances)?;
        let tau = self.inference_tau();
        let mut persona_scores = Vec::with_capacity(personas.len());
        let mut profile_scores = Vec::with_capacity(personas.len());
        for p in personas {
            let u = relevance_matrix(&h, &self.encode_persona(p)?)?;
            persona_scores.push(cumulative_score(&u, tau)?);
            profile_scores.push(u.columns().into_iter().map(|c| agg(&c.to_vec(), tau)).collect::<Result<Vec<_>>>()?);
        }
        Ok((persona_scores, profile_scores))
    }

    /// `agg(h·Wᵀ, τ)/√d` for one utterance: aggregation on the unscaled
    /// product, division afterwards.
    pub fn perception_score(&self, utterance: &str, persona: &Persona, tau: f64) -> Result<f64> {
        let h = self.encode_impression(&[utterance])?;
        let w = self.encode_persona(persona)?;
        Ok(perception_from_encodings(&h, &w, tau)?[0])
    }

    /// Per-utterance scores and relevance rows (`H_n·Wᵀ/√d`) in one pass.
    pub fn perception_rows<S: AsRef<str>>(&self, utterances: &[S], persona: &Persona, tau: f64) -> Result<(Vec<f64>, Matrix)> {
        let h = self.encode_impression(utterances)?;
        let w = self.encode_persona(persona)?;
        Ok((perception_from_encodings(&h, &w, tau)?, relevance_matrix(&h, &w)?))
    }

    /// Margin loss with L1 on both relevance matrices, and its gradients.
    pub fn loss_with_grad<S: AsRef<str>>(
        &self,
        utterances: &[S],
        real: &Persona,
        distractor: &Persona,
        tau: f64,
    ) -> Result<(ReceiverLoss, ReceiverGrads)> {
        let p = &self.config.loss;
        let inv_sqrt_d = 1.0 / (self.dim() as f64).sqrt();
        let mut g = Graph::new();
        let h = self.encode_node(&mut g, &self.impression, utterances)?;
        let wa = self.encode_node(&mut g, &self.persona, &real.profiles)?;
        let wz = self.encode_node(&mut g, &self.persona, &distractor.profiles)?;
        let ua = g.matmul_bt(h, wa);
        let ua = g.scale(ua, inv_sqrt_d);
        let uz = g.matmul_bt(h, wz);
        let uz = g.scale(uz, inv_sqrt_d);
        let ca = cumulative_score_node(&mut g, ua, tau);
        let cz = cumulative_score_node(&mut g, uz, tau);

        let lead = g.sub(ca, cz);
        let gap = g.scale(lead, -1.0);
        let gap = g.add_scalar(gap, p.margin);
        let hinge = g.relu(gap);
        let abs_a = g.abs(ua);
        let la = g.sum(abs_a);
        let abs_z = g.abs(uz);
        let lz = g.sum(abs_z);
        let l1 = g.add(la, lz);
        let reg = g.scale(l1, p.l1_weight);
        let loss = g.add(hinge, reg);

        let back = g.backward(loss)?;
        let grads = ReceiverGrads {
            impression: back.gradients(self.impression.params()),
            persona: back.gradients(self.persona.params()),
        };
        Ok((
            ReceiverLoss {
                loss: g.scalar(loss),
                c_real: g.scalar(ca),
                c_distractor: g.scalar(cz),
                l1: g.scalar(l1),
            },
            grads,
        ))
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: RECEIVER_KIND.into(),
            config: serde_json::to_value(&self.config)?,
            vocab: self.vocab.clone(),
            meta,
            params: self.merged_params(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.expect_kind(RECEIVER_KIND)?;
        let config: ReceiverConfig = serde_json::from_value(ckpt.config)?;
        if config.encoder.vocab_size != ckpt.vocab.len() {
            return Err(Error::Checkpoint("config vocab_size disagrees with vocabulary".into()));
        }
        config.loss.validate()?;
        Self::from_parts(config, ckpt.vocab, &ckpt.params)
    }
}

/// Perception score of each row of `h` against persona encodings `w`.
pub fn perception_from_encodings(h: &Matrix, w: &Matrix, tau: f64) -> Result<Vec<f64>> {
    if h.ncols() != w.ncols() {
        return Err(Error::Shape("impression and persona dims differ".into()));
    }
    let sqrt_d = (h.ncols() as f64).sqrt();
    let raw = h.dot(&w.t());
    raw.rows()
        .into_iter()
        .map(|r| Ok(agg(&r.to_vec(), tau)? / sqrt_d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic};
    use crate::neural::grad_check;
    use crate::receiver::receiver_loss;
    use ndarray::array;

    fn fixture() -> (Receiver, Vec<crate::corpus::DialogueEpisode>) {
        let eps = generate_synthetic(4, 3, 2).unwrap();
        let vocab = build_vocab(&eps, 1).unwrap();
        let cfg = ReceiverConfig::new(SequenceModelConfig::tiny(vocab.len(), false));
        (Receiver::new(vocab, cfg, 5).unwrap(), eps)
    }

    #[test]
    fn shapes_and_permutation() {
        let (r, eps) = fixture();
        let utts: Vec<String> = eps[0].turns.iter().map(|t| t.text.clone()).collect();
        let h = r.encode_impression(&utts).unwrap();
        assert_eq!(h.dim(), (utts.len(), r.dim()));
        let rev: Vec<String> = utts.iter().rev().cloned().collect();
        let hr = r.encode_impression(&rev).unwrap();
        for i in 0..utts.len() {
            assert_eq!(h.row(i), hr.row(utts.len() - 1 - i));
        }
        let w = r.encode_persona(&eps[0].persona_b).unwrap();
        assert_eq!(w.nrows(), eps[0].persona_b.profiles.len());
        assert!(r.encode_impression(&[""]).is_err());
        assert!(r.encode_impression::<&str>(&[]).is_err());
    }

    #[test]
    fn encoders_are_distinct() {
        let (r, _) = fixture();
        let p = Persona::new(["i like dogs"]).unwrap();
        assert_ne!(r.encode_impression(&["i like dogs"]).unwrap(), r.encode_persona(&p).unwrap());
    }

    #[test]
    fn perception_singleton_and_zero() {
        let h = array![[1.0, 2.0, 0.0, 1.0]];
        let w = array![[0.5, 0.5, 3.0, -1.0]];
        let s = perception_from_encodings(&h, &w, 0.5).unwrap()[0];
        assert!((s - 0.5 / 2.0).abs() < 1e-12);
        assert_eq!(perception_from_encodings(&h, &w, 50.0).unwrap()[0], s);
        let z = perception_from_encodings(&Matrix::zeros((1, 4)), &array![[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0]], 0.5).unwrap();
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn loss_matches_pure_function() {
        let (r, eps) = fixture();
        let utts: Vec<&str> = eps[0].turns_of(crate::corpus::Speaker::B).map(|t| t.text.as_str()).collect();
        let (real, dist) = (&eps[0].persona_b, &eps[1].persona_b);
        let (l, _) = r.loss_with_grad(&utts, real, dist, 2.0).unwrap();
        let expected = receiver_loss(&r.relevance(&utts, real).unwrap(), &r.relevance(&utts, dist).unwrap(), &r.config().loss, 2.0).unwrap();
        assert!((l.loss - expected).abs() < 1e-12);
        assert!(l.loss >= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut r, eps) = fixture();
        // A large L1 weight makes that term visible in the check.
        r.config.loss.l1_weight = 0.05;
        let utts: Vec<&str> = eps[0].turns_of(crate::corpus::Speaker::B).map(|t| t.text.as_str()).collect();
        let (real, dist) = (eps[0].persona_b.clone(), eps[1].persona_b.clone());
        let report = grad_check(
            |p| {
                let rp = r.with_merged_params(p)?;
                let (l, g) = rp.loss_with_grad(&utts, &real, &dist, 1.5)?;
                Ok((l.loss, g.merged()))
            },
            &r.merged_params(),
            24,
            1e-5,
            7,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (r, eps) = fixture();
        let back = Receiver::from_checkpoint(
            Checkpoint::from_bytes(&r.to_checkpoint(serde_json::json!({})).unwrap().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        let utts = ["i like dogs", "my job is chef"];
        assert_eq!(
            r.relevance(&utts, &eps[0].persona_b).unwrap(),
            back.relevance(&utts, &eps[0].persona_b).unwrap()
        );
    }
}
