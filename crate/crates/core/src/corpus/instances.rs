use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DialogueEpisode, Persona, Speaker, Turn};
use crate::error::{Error, Result};

/// Which interlocutors' turns become training targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Responders {
    A,
    B,
    #[default]
    Both,
}

impl Responders {
    pub fn includes(self, s: Speaker) -> bool {
        matches!(
            (self, s),
            (Responders::Both, _) | (Responders::A, Speaker::A) | (Responders::B, Speaker::B)
        )
    }
}

/// A (persona, history, gold, distractor) tuple for joint MLE + next-utterance training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub responder: Speaker,
    pub persona: Persona,
    pub history: Vec<Turn>,
    pub gold: String,
    pub distractor: String,
}

/// One instance per responding turn. Distractors are drawn uniformly from the
/// utterances of *other* episodes, rejecting exact copies of the gold text.
pub fn make_instances(
    episodes: &[DialogueEpisode],
    responders: Responders,
    distractor_seed: u64,
) -> Result<Vec<TrainingInstance>> {
    if episodes.len() < 2 {
        return Err(Error::NoDistractorPool(format!(
            "distractors come from other episodes but the corpus has {}",
            episodes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(distractor_seed);
    let owner: Vec<(usize, &str)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(i, e)| e.turns.iter().map(move |t| (i, t.text.as_str())))
        .collect();

    let mut out = Vec::new();
    for (ei, ep) in episodes.iter().enumerate() {
        for (ti, turn) in ep.turns.iter().enumerate() {
            if !responders.includes(turn.speaker) {
                continue;
            }
            let Some(persona) = ep.persona(turn.speaker) else {
                continue;
            };
            let distractor = sample_distractor(&owner, ei, &turn.text, &mut rng)?;
            out.push(TrainingInstance {
                responder: turn.speaker,
                persona: persona.clone(),
                history: ep.turns[..ti].to_vec(),
                gold: turn.text.clone(),
                distractor: distractor.to_string(),
            });
        }
    }
    Ok(out)
}

fn sample_distractor<'a>(
    pool: &[(usize, &'a str)],
    episode: usize,
    gold: &str,
    rng: &mut ChaCha8Rng,
) -> Result<&'a str> {
    for _ in 0..64 {
        let (owner, text) = pool[rng.gen_range(0..pool.len())];
        if owner != episode && text != gold {
            return Ok(text);
        }
    }
    let eligible: Vec<&str> = pool
        .iter()
        .filter(|(o, t)| *o != episode && *t != gold)
        .map(|(_, t)| *t)
        .collect();
    eligible.choose(rng).copied().ok_or_else(|| {
        Error::NoDistractorPool(format!("no utterance in other episodes differs from {gold:?}"))
    })
}

/// Utterances of one interlocutor with 1 true + N distractor personas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeItem {
    pub speaker: Speaker,
    pub utterances: Vec<String>,
    pub candidates: Vec<Persona>,
    pub gold: usize,
}

impl ProbeItem {
    pub fn true_persona(&self) -> &Persona {
        &self.candidates[self.gold]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProbeSet {
    pub items: Vec<ProbeItem>,
}

/// Persona-identification items, one per (episode, side with a persona).
/// Distractors are distinct personas sampled without replacement; the true
/// persona sits at a random position.
pub fn build_probe_set(
    episodes: &[DialogueEpisode],
    num_distractors: usize,
    seed: u64,
) -> Result<ProbeSet> {
    let mut distinct: Vec<&Persona> = Vec::new();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for p in episodes
        .iter()
        .flat_map(|e| e.persona_a.iter().chain(std::iter::once(&e.persona_b)))
    {
        if seen.insert(p.id.as_str(), ()).is_none() {
            distinct.push(p);
        }
    }
    let required = num_distractors + 1;
    if distinct.len() < required {
        return Err(Error::InsufficientPersonas {
            required,
            found: distinct.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for ep in episodes {
        for speaker in [Speaker::A, Speaker::B] {
            let Some(truth) = ep.persona(speaker) else {
                continue;
            };
            let utterances: Vec<String> = ep.turns_of(speaker).map(|t| t.text.clone()).collect();
            if utterances.is_empty() {
                continue;
            }
            let others: Vec<&Persona> = distinct.iter().copied().filter(|p| p.id != truth.id).collect();
            let mut candidates: Vec<Persona> = others
                .choose_multiple(&mut rng, num_distractors)
                .map(|p| (*p).clone())
                .collect();
            let gold = rng.gen_range(0..=candidates.len());
            candidates.insert(gold, truth.clone());
            items.push(ProbeItem {
                speaker,
                utterances,
                candidates,
                gold,
            });
        }
    }
    Ok(ProbeSet { items })
}
