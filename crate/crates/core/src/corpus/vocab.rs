use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DialogueEpisode;
use crate::error::{Error, Result};
use crate::text;

pub type TokenId = usize;

/// Token table with the reserved entries first, in this order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_freq: usize,
    tokens: Vec<String>,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const UNK: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const CLS: TokenId = 3;
    pub const PS: TokenId = 4;
    pub const SEP: TokenId = 5;
    pub const MASK: TokenId = 6;
    pub const RESERVED: [&'static str; 7] =
        ["[PAD]", "[UNK]", "[EOS]", "[CLS]", "[PS]", "[SEP]", "[MASK]"];

    /// Rebuilds a vocabulary from its full token list (reserved entries included).
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        if tokens.len() < Self::RESERVED.len()
            || tokens.iter().zip(Self::RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::InvalidArgument(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry '{t}'")));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("[UNK]")
    }

    pub fn is_special(id: TokenId) -> bool {
        id < Self::RESERVED.len()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text::tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Decodes a generated response, stopping at `[EOS]`.
    pub fn decode_response(&self, ids: &[TokenId]) -> String {
        let end = ids.iter().position(|&i| i == Self::EOS).unwrap_or(ids.len());
        self.decode(&ids[..end])
    }

    /// Stable fingerprint of the token table.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VocabFile {
            min_freq: self.min_freq,
            tokens: self.tokens.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        Self::from_tokens(f.tokens, f.min_freq)
    }
}

/// Every token with corpus frequency `>= min_freq` gets an id, ordered by
/// descending frequency then lexicographically.
pub fn build_vocab(episodes: &[DialogueEpisode], min_freq: usize) -> Result<Vocab> {
    if min_freq < 1 {
        return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
    }
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("cannot build a vocabulary from no episodes".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for sentence in episodes.iter().flat_map(|e| e.sentences()) {
        for tok in text::tokenize(sentence) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = Vocab::RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens, min_freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Persona, Speaker, Turn};
    use proptest::prelude::*;

    fn episode(turn: &str) -> DialogueEpisode {
        DialogueEpisode {
            persona_a: None,
            persona_b: Persona::new(["x"]).unwrap(),
            turns: if turn.is_empty() { vec![] } else { vec![Turn::new(Speaker::A, turn)] },
            candidates: None,
        }
    }

    #[test]
    fn threshold_maps_rare_tokens_to_unk() {
        let v = build_vocab(&[episode("a a b")], 2).unwrap();
        assert_ne!(v.id("a"), Vocab::UNK);
        assert_eq!(v.id("b"), Vocab::UNK);
        assert_eq!(v.encode("a b"), vec![v.id("a"), Vocab::UNK]);
    }

    #[test]
    fn reserved_ids_fixed_and_first() {
        let v = build_vocab(&[episode("")], 1).unwrap();
        for (i, r) in Vocab::RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i);
        }
        assert_eq!(v.id("[EOS]"), Vocab::EOS);
        assert_eq!(v.len(), Vocab::RESERVED.len() + 1);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_vocab(&[episode("a")], 0).is_err());
        assert!(build_vocab(&[], 1).is_err());
    }

    #[test]
    fn roundtrip_on_corpus_sentences() {
        let eps = generate_synthetic(6, 3, 2).unwrap();
        let v = build_vocab(&eps, 1).unwrap();
        for s in eps.iter().flat_map(|e| e.sentences()) {
            assert_eq!(v.decode(&v.encode(s)), text::normalize(s));
        }
    }

    #[test]
    fn json_roundtrip_preserves_hash() {
        let eps = generate_synthetic(4, 2, 2).unwrap();
        let v = build_vocab(&eps, 1).unwrap();
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    proptest! {
        #[test]
        fn non_reserved_entries_are_bijective(words in prop::collection::vec("[a-z]{1,6}", 1..30)) {
            let text = words.join(" ");
            let v = build_vocab(&[episode(&text)], 1).unwrap();
            for w in &words {
                let id = v.id(w);
                prop_assert!(id >= Vocab::RESERVED.len());
                prop_assert_eq!(v.token(id), w.as_str());
            }
            prop_assert_eq!(v.decode(&v.encode(&text)), text);
        }
    }
}
