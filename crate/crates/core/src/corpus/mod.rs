//! Dialogue corpora: parsing, synthetic generation, vocabulary, and the
//! training and probing instances assembled from episodes.

mod instances;
mod parse;
mod synthetic;
mod vocab;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text;

pub use instances::{build_probe_set, make_instances, ProbeItem, ProbeSet, Responders, TrainingInstance};
pub use parse::{parse_corpus, read_corpus, write_jsonl, CorpusFormat};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use vocab::{build_vocab, TokenId, Vocab};

/// Profile sentences describing one interlocutor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Persona {
    pub id: String,
    pub profiles: Vec<String>,
}

impl Persona {
    /// Builds a persona whose id is a content hash of the normalised profiles.
    pub fn new<S: Into<String>>(profiles: impl IntoIterator<Item = S>) -> Result<Self> {
        let profiles: Vec<String> = profiles
            .into_iter()
            .map(|p| p.into().trim().to_string())
            .collect();
        if profiles.is_empty() {
            return Err(Error::Episode("persona has no profile sentences".into()));
        }
        if let Some(i) = profiles.iter().position(|p| text::tokenize(p).is_empty()) {
            return Err(Error::Episode(format!("profile {i} is empty after normalization")));
        }
        let mut hasher = Sha256::new();
        for p in &profiles {
            hasher.update(text::normalize(p).as_bytes());
            hasher.update(b"\n");
        }
        let id = hex::encode(&hasher.finalize()[..6]);
        Ok(Persona { id, profiles })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::A => f.write_str("A"),
            Speaker::B => f.write_str("B"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Turn {
            speaker,
            text: text.into(),
        }
    }
}

/// Ranking candidates for one B turn; `texts[gold]` is the actual response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub texts: Vec<String>,
    pub gold: usize,
}

/// One dialogue between A (who opens) and B.
///
/// `persona_a` is absent for corpora that only describe the responder, such
/// as the ParlAI `self_original` files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueEpisode {
    pub persona_a: Option<Persona>,
    pub persona_b: Persona,
    pub turns: Vec<Turn>,
    /// One entry per B turn, in order.
    pub candidates: Option<Vec<CandidateSet>>,
}

impl DialogueEpisode {
    pub fn validate(&self) -> Result<()> {
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::A } else { Speaker::B };
            if turn.speaker != expected {
                return Err(Error::Episode(format!(
                    "turn order: turn {i} is spoken by {} but {expected} was expected",
                    turn.speaker
                )));
            }
            if turn.text.trim().is_empty() {
                return Err(Error::Episode(format!("turn {i} has empty text")));
            }
        }
        if let Some(cands) = &self.candidates {
            let b_turns: Vec<&Turn> = self.turns_of(Speaker::B).collect();
            if cands.len() != b_turns.len() {
                return Err(Error::Episode(format!(
                    "{} candidate sets for {} B turns",
                    cands.len(),
                    b_turns.len()
                )));
            }
            for (k, (set, turn)) in cands.iter().zip(b_turns).enumerate() {
                if set.texts.get(set.gold) != Some(&turn.text) {
                    return Err(Error::Episode(format!(
                        "candidate set {k}: gold index does not point at the response"
                    )));
                }
                let copies = set.texts.iter().filter(|t| **t == turn.text).count();
                if copies != 1 {
                    return Err(Error::Episode(format!(
                        "candidate set {k}: response appears {copies} times"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn turns_of(&self, speaker: Speaker) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(move |t| t.speaker == speaker)
    }

    pub fn persona(&self, speaker: Speaker) -> Option<&Persona> {
        match speaker {
            Speaker::A => self.persona_a.as_ref(),
            Speaker::B => Some(&self.persona_b),
        }
    }

    /// Every sentence in the episode: profiles, turns and candidates.
    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        let profiles_a = self.persona_a.iter().flat_map(|p| p.profiles.iter());
        let cands = self
            .candidates
            .iter()
            .flat_map(|c| c.iter().flat_map(|s| s.texts.iter()));
        profiles_a
            .chain(self.persona_b.profiles.iter())
            .chain(self.turns.iter().map(|t| &t.text))
            .chain(cands)
            .map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn persona(p: &[&str]) -> Persona {
        Persona::new(p.iter().copied()).unwrap()
    }

    #[test]
    fn persona_id_is_content_hash() {
        let a = persona(&["i like dogs .", "my job is chef ."]);
        let b = persona(&["I like dogs.", "My job is chef."]);
        assert_eq!(a.id, b.id);
        assert_ne!(a.id, persona(&["i like cats ."]).id);
    }

    #[test]
    fn persona_rejects_empty() {
        assert!(Persona::new(Vec::<String>::new()).is_err());
        assert!(Persona::new(["  "]).is_err());
    }

    #[test]
    fn validate_turn_order() {
        let ep = DialogueEpisode {
            persona_a: None,
            persona_b: persona(&["i like dogs"]),
            turns: vec![Turn::new(Speaker::B, "hello")],
            candidates: None,
        };
        let err = ep.validate().unwrap_err().to_string();
        assert!(err.contains("turn order"), "{err}");
    }

    #[test]
    fn validate_candidates_contain_gold_once() {
        let mut ep = DialogueEpisode {
            persona_a: None,
            persona_b: persona(&["i like dogs"]),
            turns: vec![Turn::new(Speaker::A, "hi"), Turn::new(Speaker::B, "hello")],
            candidates: Some(vec![CandidateSet {
                texts: vec!["nope".into(), "hello".into()],
                gold: 1,
            }]),
        };
        ep.validate().unwrap();
        ep.candidates.as_mut().unwrap()[0].texts.push("hello".into());
        assert!(ep.validate().is_err());
        ep.candidates.as_mut().unwrap()[0] = CandidateSet {
            texts: vec!["nope".into(), "hello".into()],
            gold: 0,
        };
        assert!(ep.validate().is_err());
    }
}
