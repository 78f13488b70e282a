//! Deterministic templated corpus whose utterances lexically reveal the
//! speaker's persona. Used for desk-scale training runs and tests.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CandidateSet, DialogueEpisode, Persona, Speaker, Turn};
use crate::error::{Error, Result};

struct Slot {
    values: &'static [&'static str],
    profiles: &'static [&'static str],
    utterances: &'static [&'static str],
}

const SLOTS: &[Slot] = &[
    Slot {
        values: &[
            "hiking", "swimming", "painting", "chess", "cooking", "fishing", "dancing",
            "gardening", "reading", "surfing", "skiing", "cycling", "knitting", "camping",
            "singing", "running", "photography", "baking", "yoga", "boxing",
        ],
        profiles: &["i like {}.", "i enjoy {} in my free time."],
        utterances: &[
            "i spend my weekends {}.",
            "{} is what i do for fun.",
            "do you like {}? i love it.",
        ],
    },
    Slot {
        values: &[
            "teacher", "nurse", "farmer", "pilot", "chef", "lawyer", "doctor", "baker",
            "plumber", "writer", "dentist", "engineer", "artist", "mechanic", "librarian",
            "firefighter",
        ],
        profiles: &["my job is {}.", "i work as a {}."],
        utterances: &[
            "i just got back from work, being a {} is tiring.",
            "as a {} i stay very busy.",
            "work was long today, i am a {}.",
        ],
    },
    Slot {
        values: &[
            "dog", "cat", "parrot", "hamster", "rabbit", "turtle", "horse", "goldfish", "snake",
            "lizard",
        ],
        profiles: &["i have a {}.", "i own a pet {}."],
        utterances: &[
            "my {} is sleeping next to me.",
            "i need to feed my {} soon.",
            "do you have pets? i have a {}.",
        ],
    },
    Slot {
        values: &[
            "pizza", "sushi", "tacos", "pasta", "curry", "burgers", "salad", "pancakes", "steak",
            "noodles",
        ],
        profiles: &["my favorite food is {}.", "i love eating {}."],
        utterances: &[
            "i just had {} for dinner.",
            "i could eat {} every day.",
            "nothing beats a plate of {}.",
        ],
    },
    Slot {
        values: &[
            "paris", "tokyo", "boston", "texas", "london", "canada", "berlin", "chicago", "florida",
            "seattle",
        ],
        profiles: &["i live in {}.", "i grew up in {}."],
        utterances: &[
            "the weather in {} is nice today.",
            "i have lived in {} for years.",
            "have you ever been to {}? it is home.",
        ],
    },
];

const OPENERS: &[&str] = &["hi!", "hello!", "hey there."];
const ACKS: &[&str] = &["nice.", "cool!", "oh really?", "that is great."];

/// Knobs for [`generate_synthetic`]. `num_episodes` defaults to `num_personas`.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub num_personas: usize,
    pub turns_per_dialogue: usize,
    pub num_episodes: Option<usize>,
    pub num_candidates: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(num_personas: usize, turns_per_dialogue: usize, seed: u64) -> Self {
        SyntheticConfig {
            num_personas,
            turns_per_dialogue,
            num_episodes: None,
            num_candidates: 20,
            seed,
        }
    }

    pub fn with_episodes(mut self, n: usize) -> Self {
        self.num_episodes = Some(n);
        self
    }

    pub fn generate(&self) -> Result<Vec<DialogueEpisode>> {
        if self.num_personas < 2 {
            return Err(Error::InvalidArgument(format!(
                "synthetic corpus needs at least 2 personas for distractor sampling, got {}",
                self.num_personas
            )));
        }
        if self.turns_per_dialogue == 0 {
            return Err(Error::InvalidArgument("turns_per_dialogue must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let personas = sample_personas(self.num_personas, &mut rng)?;

        let num_episodes = self.num_episodes.unwrap_or(self.num_personas);
        let mut episodes = Vec::with_capacity(num_episodes);
        for i in 0..num_episodes {
            let a = i % personas.len();
            let mut b = rng.gen_range(0..personas.len() - 1);
            if b >= a {
                b += 1;
            }
            let (pa, pb) = (&personas[a], &personas[b]);
            let start_a = rng.gen_range(0..SLOTS.len());
            let start_b = rng.gen_range(0..SLOTS.len());
            let mut turns = Vec::with_capacity(2 * self.turns_per_dialogue);
            for k in 0..self.turns_per_dialogue {
                let prefix = if k == 0 { OPENERS.choose(&mut rng) } else { None };
                turns.push(Turn::new(
                    Speaker::A,
                    reveal(pa, (start_a + k) % SLOTS.len(), prefix.copied(), &mut rng),
                ));
                let ack = if rng.gen_bool(0.5) { ACKS.choose(&mut rng) } else { None };
                turns.push(Turn::new(
                    Speaker::B,
                    reveal(pb, (start_b + k) % SLOTS.len(), ack.copied(), &mut rng),
                ));
            }
            episodes.push(DialogueEpisode {
                persona_a: Some(pa.persona.clone()),
                persona_b: pb.persona.clone(),
                turns,
                candidates: None,
            });
        }
        attach_candidates(&mut episodes, self.num_candidates, &mut rng);
        Ok(episodes)
    }
}

/// Templated corpus with `num_personas` personas and as many episodes, each
/// of `turns_per_dialogue` A/B exchanges. Same seed, same corpus.
pub fn generate_synthetic(
    num_personas: usize,
    turns_per_dialogue: usize,
    seed: u64,
) -> Result<Vec<DialogueEpisode>> {
    SyntheticConfig::new(num_personas, turns_per_dialogue, seed).generate()
}

struct SlotPersona {
    persona: Persona,
    values: Vec<&'static str>,
}

fn sample_personas(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SlotPersona>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let values: Vec<&'static str> = SLOTS.iter().map(|s| *s.values.choose(rng).unwrap()).collect();
        if !seen.insert(values.clone()) {
            continue;
        }
        let profiles: Vec<String> = SLOTS
            .iter()
            .zip(&values)
            .map(|(slot, v)| fill(slot.profiles.choose(rng).unwrap(), v))
            .collect();
        out.push(SlotPersona {
            persona: Persona::new(profiles)?,
            values,
        });
    }
    Ok(out)
}

fn fill(template: &str, value: &str) -> String {
    template.replace("{}", value)
}

fn reveal(p: &SlotPersona, slot: usize, prefix: Option<&str>, rng: &mut ChaCha8Rng) -> String {
    let body = fill(SLOTS[slot].utterances.choose(rng).unwrap(), p.values[slot]);
    match prefix {
        Some(pre) => format!("{pre} {body}"),
        None => body,
    }
}

fn attach_candidates(episodes: &mut [DialogueEpisode], num_candidates: usize, rng: &mut ChaCha8Rng) {
    if num_candidates < 2 {
        return;
    }
    let pool: Vec<String> = episodes
        .iter()
        .flat_map(|e| e.turns.iter().map(|t| t.text.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if pool.len() < num_candidates {
        return;
    }
    for ep in episodes.iter_mut() {
        let mut sets = Vec::new();
        for turn in ep.turns.iter().filter(|t| t.speaker == Speaker::B) {
            let others: Vec<&String> = pool.iter().filter(|t| **t != turn.text).collect();
            let mut texts: Vec<String> = others
                .choose_multiple(rng, num_candidates - 1)
                .map(|s| (*s).clone())
                .collect();
            let gold = rng.gen_range(0..num_candidates);
            texts.insert(gold, turn.text.clone());
            sets.push(CandidateSet { texts, gold });
        }
        ep.candidates = Some(sets);
    }
}
