use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Receiver, ReceiverGrads, ReceiverLoss};
use super::scoring::tau_schedule;
use crate::corpus::{DialogueEpisode, Persona, Speaker};
use crate::error::{Error, Result};
use crate::neural::{Adam, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ReceiverTrainConfig {
    fn default() -> Self {
        ReceiverTrainConfig {
            epochs: 2,
            batch_size: 8,
            optimizer: OptimizerConfig::supervised(),
            seed: 0,
        }
    }
}

/// One interlocutor's utterances with their true persona.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImpressionItem {
    pub speaker: Speaker,
    pub utterances: Vec<String>,
    pub persona: Persona,
}

/// One item per (episode, side) that has a persona and at least one utterance.
pub fn impression_items(episodes: &[DialogueEpisode]) -> Vec<ImpressionItem> {
    let mut items = Vec::new();
    for ep in episodes {
        for speaker in [Speaker::A, Speaker::B] {
            let Some(persona) = ep.persona(speaker) else { continue };
            let utterances: Vec<String> = ep.turns_of(speaker).map(|t| t.text.clone()).collect();
            if !utterances.is_empty() {
                items.push(ImpressionItem {
                    speaker,
                    utterances,
                    persona: persona.clone(),
                });
            }
        }
    }
    items
}

/// Distinct personas of a corpus, first occurrence order.
pub fn persona_pool(episodes: &[DialogueEpisode]) -> Vec<Persona> {
    let mut seen = std::collections::HashSet::new();
    let mut pool = Vec::new();
    for ep in episodes {
        for p in [ep.persona_a.as_ref(), Some(&ep.persona_b)].into_iter().flatten() {
            if seen.insert(p.id.clone()) {
                pool.push(p.clone());
            }
        }
    }
    pool
}

fn sample_distractor<'a, R: Rng>(pool: &'a [Persona], real: &Persona, rng: &mut R) -> &'a Persona {
    loop {
        let p = &pool[rng.gen_range(0..pool.len())];
        if p.id != real.id {
            return p;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReceiverEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub hinge_active: f64,
    pub tau_end: f64,
}

/// Trains on every impression item once per epoch against a freshly drawn
/// distractor persona, annealing τ linearly across all items of all epochs.
pub fn train_receiver(
    r: &mut Receiver,
    items: &[ImpressionItem],
    pool: &[Persona],
    config: &ReceiverTrainConfig,
    mut on_epoch: impl FnMut(&ReceiverEpochLog),
) -> Result<Vec<ReceiverEpochLog>> {
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("no impression items".into()));
    }
    let distinct = pool.iter().map(|p| &p.id).collect::<std::collections::HashSet<_>>().len();
    if distinct < 2 {
        return Err(Error::InsufficientPersonas { required: 2, found: distinct });
    }
    let mut adam_imp = Adam::new(config.optimizer.clone(), r.impression_params())?;
    let mut adam_per = Adam::new(config.optimizer.clone(), r.persona_params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total = config.epochs * items.len();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut logs = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut log = ReceiverEpochLog {
            epoch,
            ..Default::default()
        };
        for batch in order.chunks(config.batch_size) {
            let mut grads = ReceiverGrads::zeros_like(r);
            for &i in batch {
                let item = &items[i];
                let distractor = sample_distractor(pool, &item.persona, &mut rng);
                let tau = tau_schedule(step, total, &r.config().loss);
                step += 1;
                let (l, g) = r.loss_with_grad(&item.utterances, &item.persona, distractor, tau)?;
                grads.accumulate(&g);
                log.loss += l.loss;
                if l.c_real - l.c_distractor < r.config().loss.margin {
                    log.hinge_active += 1.0;
                }
                log.tau_end = tau;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_imp.step(r.impression_params_mut(), &grads.impression)?;
            adam_per.step(r.persona_params_mut(), &grads.persona)?;
        }
        log.loss /= items.len() as f64;
        log.hinge_active /= items.len() as f64;
        log::info!("receiver epoch {epoch}: loss {:.4} hinge-active {:.3}", log.loss, log.hinge_active);
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Fraction of items whose true persona outscores a sampled distractor,
/// at the inference temperature.
pub fn real_over_distractor_rate(r: &Receiver, items: &[ImpressionItem], pool: &[Persona], seed: u64) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no impression items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0usize;
    for item in items {
        let distractor = sample_distractor(pool, &item.persona, &mut rng);
        let ca = r.persona_score(&item.utterances, &item.persona)?;
        let cz = r.persona_score(&item.utterances, distractor)?;
        if ca > cz {
            wins += 1;
        }
    }
    Ok(wins as f64 / items.len() as f64)
}

/// Evaluates the loss terms without gradients, for a fixed distractor.
pub fn evaluate_item(r: &Receiver, item: &ImpressionItem, distractor: &Persona, tau: f64) -> Result<ReceiverLoss> {
    Ok(r.loss_with_grad(&item.utterances, &item.persona, distractor, tau)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic};
    use crate::neural::SequenceModelConfig;
    use crate::receiver::ReceiverConfig;

    #[test]
    fn items_and_pool() {
        let eps = generate_synthetic(5, 4, 1).unwrap();
        let items = impression_items(&eps);
        assert_eq!(items.len(), eps.len() * 2);
        let total: usize = items.iter().map(|i| i.utterances.len()).sum();
        assert_eq!(total, eps.iter().map(|e| e.turns.len()).sum::<usize>());
        assert_eq!(persona_pool(&eps).len(), 5);
    }

    #[test]
    fn training_reduces_loss() {
        let eps = generate_synthetic(8, 4, 3).unwrap();
        let vocab = build_vocab(&eps, 1).unwrap();
        let mut r = Receiver::new(vocab.clone(), ReceiverConfig::new(SequenceModelConfig::tiny(vocab.len(), false)), 1).unwrap();
        let items = impression_items(&eps);
        let pool = persona_pool(&eps);
        let cfg = ReceiverTrainConfig {
            epochs: 4,
            optimizer: OptimizerConfig::with_lr(2e-3),
            ..Default::default()
        };
        let logs = train_receiver(&mut r, &items, &pool, &cfg, |_| {}).unwrap();
        assert!(logs.iter().all(|l| l.loss >= 0.0));
        assert!(logs[3].loss < logs[0].loss, "{logs:?}");
        assert!((logs[3].tau_end - 0.5).abs() < 0.5);
    }

    #[test]
    fn single_persona_pool_rejected() {
        let eps = generate_synthetic(3, 2, 3).unwrap();
        let vocab = build_vocab(&eps, 1).unwrap();
        let mut r = Receiver::new(vocab.clone(), ReceiverConfig::new(SequenceModelConfig::tiny(vocab.len(), false)), 1).unwrap();
        let items = impression_items(&eps);
        let pool = vec![items[0].persona.clone()];
        assert!(matches!(
            train_receiver(&mut r, &items, &pool, &ReceiverTrainConfig::default(), |_| {}),
            Err(Error::InsufficientPersonas { .. })
        ));
    }
}
