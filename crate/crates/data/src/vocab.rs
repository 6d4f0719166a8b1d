//! Deterministic id-to-word table shared by the generator and the parser.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::DataError;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;

const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<pad>"];
const GRAMMAR_WORDS: [&str; 5] = ["no", "findings", ".", "seen", "in"];
pub const CONNECTIVES: [&str; 3] = ["and", "also", "further"];

const CONSONANTS: [char; 8] = ['k', 'm', 'n', 'r', 's', 't', 'v', 'z'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

/// Fixed vocabulary: specials, grammar words, connectives, entity words,
/// position words, then filler words up to the configured size. Entirely
/// determined by (num_entities, num_positions, pos_grid_w, vocab_size).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, u32>,
    entity_base: u32,
    position_base: u32,
    num_entities: usize,
    num_positions: usize,
}

fn syllable(i: usize) -> String {
    let c = CONSONANTS[i / VOWELS.len()];
    let v = VOWELS[i % VOWELS.len()];
    format!("{}{}", c, v)
}

/// Pronounceable pseudo-word for an entity id; unique for ids below 1600.
fn entity_word(e: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    assert!(e < n * n, "entity id {} exceeds the word space", e);
    format!("{}{}", syllable(e / n), syllable(e % n))
}

/// Grid-reference word for a position id, e.g. "r2c3".
fn position_word(p: usize, grid_w: usize) -> String {
    format!("r{}c{}", p / grid_w, p % grid_w)
}

impl Vocab {
    pub fn new(
        num_entities: usize,
        num_positions: usize,
        pos_grid_w: usize,
        vocab_size: usize,
    ) -> Result<Vocab, DataError> {
        let mut words: Vec<String> = Vec::with_capacity(vocab_size);
        words.extend(SPECIALS.iter().map(|s| s.to_string()));
        words.extend(GRAMMAR_WORDS.iter().map(|s| s.to_string()));
        words.extend(CONNECTIVES.iter().map(|s| s.to_string()));
        let entity_base = words.len() as u32;
        words.extend((0..num_entities).map(entity_word));
        let position_base = words.len() as u32;
        words.extend((0..num_positions).map(|p| position_word(p, pos_grid_w)));
        if words.len() > vocab_size {
            return Err(DataError::Config(format!(
                "vocab_size = {} cannot hold the {} required words",
                vocab_size,
                words.len()
            )));
        }
        let filler_start = words.len();
        words.extend((filler_start..vocab_size).map(|i| format!("fill{}", i)));
        let mut vocab = Vocab {
            words,
            ids: HashMap::new(),
            entity_base,
            position_base,
            num_entities,
            num_positions,
        };
        vocab.rebuild_ids()?;
        Ok(vocab)
    }

    fn rebuild_ids(&mut self) -> Result<(), DataError> {
        self.ids.clear();
        for (i, w) in self.words.iter().enumerate() {
            if self.ids.insert(w.clone(), i as u32).is_some() {
                return Err(DataError::Config(format!("duplicate vocab word {:?}", w)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    /// Token id of the canonical word for entity `e`.
    pub fn entity_token(&self, e: usize) -> u32 {
        assert!(e < self.num_entities);
        self.entity_base + e as u32
    }

    /// Token id of the canonical word for position `p`.
    pub fn position_token(&self, p: usize) -> u32 {
        assert!(p < self.num_positions);
        self.position_base + p as u32
    }

    /// Inverse of `entity_token`.
    pub fn entity_of(&self, id: u32) -> Option<usize> {
        let off = id.checked_sub(self.entity_base)? as usize;
        (off < self.num_entities).then_some(off)
    }

    /// Inverse of `position_token`.
    pub fn position_of(&self, id: u32) -> Option<usize> {
        let off = id.checked_sub(self.position_base)? as usize;
        (off < self.num_positions).then_some(off)
    }

    pub fn is_connective(&self, id: u32) -> bool {
        let base = (SPECIALS.len() + GRAMMAR_WORDS.len()) as u32;
        id >= base && id < base + CONNECTIVES.len() as u32
    }

    pub fn connective_token(&self, k: usize) -> u32 {
        assert!(k < CONNECTIVES.len());
        (SPECIALS.len() + GRAMMAR_WORDS.len() + k) as u32
    }

    pub fn grammar_token(&self, word: &str) -> u32 {
        self.id(word)
            .unwrap_or_else(|| panic!("grammar word {:?} missing from vocab", word))
    }

    /// The plain word list, index = id. This is what vocab.json stores.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Render a token sequence as space-joined words; unknown ids become "<?>".
    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Restores the id lookup after deserialization.
    pub fn finish_load(&mut self) -> Result<(), DataError> {
        self.rebuild_ids()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_stable_and_invertible() {
        let v = Vocab::new(12, 16, 4, 128).unwrap();
        assert_eq!(v.len(), 128);
        assert_eq!(v.word(BOS), Some("<bos>"));
        assert_eq!(v.word(EOS), Some("<eos>"));
        for e in 0..12 {
            assert_eq!(v.entity_of(v.entity_token(e)), Some(e));
        }
        for p in 0..16 {
            assert_eq!(v.position_of(v.position_token(p)), Some(p));
        }
        assert_eq!(v.word(v.position_token(7)), Some("r1c3"));
        assert_eq!(v.id("seen"), Some(v.grammar_token("seen")));
        // Entity and position ranges never overlap specials or each other.
        assert!(v.entity_of(BOS).is_none());
        assert!(v.position_of(v.entity_token(0)).is_none());
    }

    #[test]
    fn entity_words_are_distinct() {
        let v = Vocab::new(40, 16, 4, 128).unwrap();
        let mut seen = std::collections::HashSet::new();
        for e in 0..40 {
            assert!(seen.insert(v.word(v.entity_token(e)).unwrap().to_string()));
        }
    }

    #[test]
    fn too_small_vocab_is_an_error() {
        assert!(Vocab::new(12, 16, 4, 20).is_err());
    }
}
