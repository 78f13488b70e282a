use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ranking::{hits_at_1, mrr, perplexity, rank_desc};
use super::text::{bleu4, word_f1};
use crate::corpus::{DialogueEpisode, ProbeItem, ProbeSet, Speaker};
use crate::error::Result;
use crate::receiver::Receiver;
use crate::transmitter::{DecodeParams, RankMode, Tail, Transmitter};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub alpha: f64,
    pub rank_mode: RankMode,
    /// Decode each response for F1/BLEU; skipped when `None`.
    pub decode: Option<DecodeParams>,
    pub keep_rows: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            alpha: 0.1,
            rank_mode: RankMode::Combined,
            decode: Some(DecodeParams::default()),
            keep_rows: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub examples: usize,
    pub tokens: usize,
    pub ranked: usize,
    pub generated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub episode: usize,
    pub turn: usize,
    pub gold: String,
    pub mean_nll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Omitted when the corpus carries no candidate sets.
    pub hits_at_1: Option<f64>,
    pub ppl: f64,
    pub f1: Option<f64>,
    pub bleu4: Option<f64>,
    pub counts: EvalCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<EvalRow>,
}

/// Scores every B turn: perplexity of the gold response, Hits@1 over its
/// candidate set, and F1/BLEU of the decoded response.
pub fn evaluate_transmitter(t: &Transmitter, episodes: &[DialogueEpisode], options: &EvalOptions) -> Result<EvalReport> {
    let mut nlls = Vec::new();
    let mut hits = 0usize;
    let mut counts = EvalCounts::default();
    let (mut f1_sum, mut bleu_sum) = (0.0, 0.0);
    let mut rows = Vec::new();
    let mut warned = false;
    for (e, ep) in episodes.iter().enumerate() {
        let mut b_index = 0;
        for (i, turn) in ep.turns.iter().enumerate() {
            if turn.speaker != Speaker::B {
                continue;
            }
            let ctx = t.context(&ep.persona_b, &ep.turns[..i], Speaker::B);
            let gold_tokens = t.vocab().encode(&turn.text);
            let layout = t.layout(
                &ctx,
                Tail::Response {
                    tokens: &gold_tokens,
                    eos: true,
                    cls: false,
                },
            )?;
            let example_nlls = t.token_nlls(&layout)?;
            let mean_nll = example_nlls.iter().sum::<f64>() / example_nlls.len() as f64;
            counts.tokens += example_nlls.len();
            nlls.extend(example_nlls);

            let mut hit = None;
            match ep.candidates.as_ref().and_then(|c| c.get(b_index)) {
                Some(set) => {
                    let mut scores = Vec::with_capacity(set.texts.len());
                    for text in &set.texts {
                        let c = t.score_candidate(&ctx, &t.vocab().encode(text), options.alpha)?;
                        scores.push(c.rank_score(options.alpha, options.rank_mode));
                    }
                    let h = hits_at_1(&scores, set.gold)?;
                    hits += h as usize;
                    counts.ranked += 1;
                    hit = Some(h);
                }
                None if !warned => {
                    log::warn!("episode {e} has no candidate set for B turn {b_index}; Hits@1 skips it");
                    warned = true;
                }
                None => {}
            }

            let mut generated = None;
            if let Some(params) = &options.decode {
                let out = t.decode_beam_ranked(&ctx, params, options.rank_mode)?;
                let text = out.best().text.clone();
                f1_sum += word_f1(&text, &turn.text);
                bleu_sum += bleu4(&text, &turn.text);
                counts.generated += 1;
                generated = Some(text);
            }
            counts.examples += 1;
            if options.keep_rows {
                rows.push(EvalRow {
                    episode: e,
                    turn: i,
                    gold: turn.text.clone(),
                    mean_nll,
                    hit,
                    generated,
                });
            }
            b_index += 1;
        }
    }
    let ppl = perplexity(&nlls)?;
    let per = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
    Ok(EvalReport {
        hits_at_1: per(hits as f64, counts.ranked),
        ppl,
        f1: per(f1_sum, counts.generated),
        bleu4: per(bleu_sum, counts.generated),
        counts,
        rows,
    })
}

/// Scores candidate personas for a probe item.
pub trait PersonaScorer {
    /// Score of each candidate persona and of each of its profile sentences.
    fn score_item(&mut self, item: &ProbeItem) -> Result<(Vec<f64>, Vec<Vec<f64>>)>;
}

impl PersonaScorer for &Receiver {
    fn score_item(&mut self, item: &ProbeItem) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.candidate_scores(&item.utterances, &item.candidates)
    }
}

/// Independent uniform scores: the chance baseline.
pub struct RandomScorer(ChaCha8Rng);

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        RandomScorer(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl PersonaScorer for RandomScorer {
    fn score_item(&mut self, item: &ProbeItem) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let personas = item.candidates.iter().map(|_| self.0.gen()).collect();
        let profiles = item
            .candidates
            .iter()
            .map(|p| p.profiles.iter().map(|_| self.0.gen()).collect())
            .collect();
        Ok((personas, profiles))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub speaker: Speaker,
    pub gold: usize,
    pub predicted: usize,
    pub reciprocal_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub hits_at_1: f64,
    /// Over all profile sentences of all candidates, the true persona's
    /// sentences being relevant.
    pub mrr: f64,
    pub items: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<ProbeRow>,
}

pub fn probe_receiver(mut scorer: impl PersonaScorer, set: &ProbeSet, keep_rows: bool) -> Result<ProbeReport> {
    if set.items.is_empty() {
        return Err(crate::Error::InvalidArgument("empty probe set".into()));
    }
    let mut hits = 0usize;
    let mut ranked_lists = Vec::with_capacity(set.items.len());
    let mut relevant_sets = Vec::with_capacity(set.items.len());
    let mut rows = Vec::new();
    for item in &set.items {
        let (persona_scores, profile_scores) = scorer.score_item(item)?;
        hits += hits_at_1(&persona_scores, item.gold)? as usize;
        let mut flat = Vec::new();
        let mut relevant = Vec::new();
        for (c, scores) in profile_scores.iter().enumerate() {
            for &s in scores {
                if c == item.gold {
                    relevant.push(flat.len());
                }
                flat.push(s);
            }
        }
        let ranked = rank_desc(&flat);
        if keep_rows {
            rows.push(ProbeRow {
                speaker: item.speaker,
                gold: item.gold,
                predicted: rank_desc(&persona_scores)[0],
                reciprocal_rank: mrr(std::slice::from_ref(&ranked), std::slice::from_ref(&relevant))?,
            });
        }
        ranked_lists.push(ranked);
        relevant_sets.push(relevant);
    }
    Ok(ProbeReport {
        hits_at_1: hits as f64 / set.items.len() as f64,
        mrr: mrr(&ranked_lists, &relevant_sets)?,
        items: set.items.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_probe_set, build_vocab, generate_synthetic, Persona};
    use crate::neural::SequenceModelConfig;
    use crate::receiver::ReceiverConfig;

    #[test]
    fn random_probe_near_chance() {
        let eps = generate_synthetic(40, 4, 8).unwrap();
        let set = build_probe_set(&eps, 31, 2).unwrap();
        let mut hits = 0.0;
        let mut n = 0;
        for seed in 0..40 {
            let r = probe_receiver(RandomScorer::new(seed), &set, false).unwrap();
            hits += r.hits_at_1 * r.items as f64;
            n += r.items;
            assert!(r.mrr > 0.0 && r.mrr <= 1.0);
        }
        let rate = hits / n as f64;
        assert!((rate - 1.0 / 32.0).abs() < 0.02, "{rate}");
    }

    struct Oracle;
    impl PersonaScorer for Oracle {
        fn score_item(&mut self, item: &ProbeItem) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
            let s: Vec<f64> = (0..item.candidates.len()).map(|c| (c == item.gold) as u8 as f64).collect();
            let p = item
                .candidates
                .iter()
                .enumerate()
                .map(|(c, p)| vec![s[c]; p.profiles.len()])
                .collect();
            Ok((s, p))
        }
    }

    #[test]
    fn oracle_probe_is_perfect_for_hits() {
        let eps = generate_synthetic(40, 4, 8).unwrap();
        let set = build_probe_set(&eps, 31, 2).unwrap();
        let r = probe_receiver(Oracle, &set, true).unwrap();
        assert_eq!(r.hits_at_1, 1.0);
        // Relevant sentences fill the top ranks, so MRR is the mean of 1/k over them.
        let l = set.items[0].true_persona().profiles.len();
        let expected = (1..=l).map(|k| 1.0 / k as f64).sum::<f64>() / l as f64;
        assert!((r.rows[0].reciprocal_rank - expected).abs() < 1e-12);
    }

    #[test]
    fn receiver_scorer_runs() {
        let eps = generate_synthetic(8, 2, 8).unwrap();
        let vocab = build_vocab(&eps, 1).unwrap();
        let r = Receiver::new(vocab.clone(), ReceiverConfig::new(SequenceModelConfig::tiny(vocab.len(), false)), 0).unwrap();
        let set = build_probe_set(&eps, 3, 2).unwrap();
        let report = probe_receiver(&r, &set, false).unwrap();
        assert_eq!(report.items, set.items.len());
        let p: Persona = set.items[0].candidates[0].clone();
        let (a, _) = (&r).score_item(&set.items[0]).unwrap();
        assert!((a[0] - r.persona_score(&set.items[0].utterances, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn evaluation_report_counts() {
        let eps = generate_synthetic(25, 4, 3).unwrap();
        let vocab = build_vocab(&eps, 1).unwrap();
        let t = Transmitter::new(vocab.clone(), SequenceModelConfig::tiny(vocab.len(), true), 2).unwrap();
        let opts = EvalOptions {
            decode: Some(DecodeParams { max_steps: 4, ..Default::default() }),
            keep_rows: true,
            ..Default::default()
        };
        let report = evaluate_transmitter(&t, &eps[..2], &opts).unwrap();
        let b_turns: usize = eps[..2].iter().map(|e| e.turns_of(Speaker::B).count()).sum();
        assert_eq!(report.counts.examples, b_turns);
        assert_eq!(report.rows.len(), b_turns);
        assert!(report.ppl >= 1.0);
        let h = report.hits_at_1.unwrap();
        assert!((0.0..=1.0).contains(&h));
        assert!(report.f1.is_some());
        // Perplexity agrees with the mean MLE loss over the same tokens.
        let mut total = 0.0;
        let mut n = 0;
        for ep in &eps[..2] {
            for (i, turn) in ep.turns.iter().enumerate().filter(|(_, t)| t.speaker == Speaker::B) {
                let layout = t.build_input(&ep.persona_b, &ep.turns[..i], Speaker::B, Some(&turn.text), false).unwrap();
                let k = layout.targets().len();
                total += t.mle_loss(&layout).unwrap() * k as f64;
                n += k;
            }
        }
        assert!((report.ppl - (total / n as f64).exp()).abs() < 1e-6);
        let no_cands: Vec<_> = eps[..2].iter().cloned().map(|mut e| {
            e.candidates = None;
            e
        }).collect();
        let r2 = evaluate_transmitter(&t, &no_cands, &EvalOptions { decode: None, ..Default::default() }).unwrap();
        assert_eq!(r2.hits_at_1, None);
        assert_eq!(r2.f1, None);
        assert!((r2.ppl - report.ppl).abs() < 1e-12);
    }
}
