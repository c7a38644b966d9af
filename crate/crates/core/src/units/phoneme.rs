use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{UnitInventory, UnitKind, UnitSequence, BOUNDARY, UNK};
use crate::corpus::Lexicon;
use crate::seed::rng_for;

/// One fixed pronunciation index per lexicon word.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronChoice {
    pub seed: u64,
    pub index: BTreeMap<String, usize>,
}

impl PronChoice {
    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }
}

/// Uniform seeded pick per word. Each word draws from its own stream, so
/// the choice for a word does not depend on the rest of the lexicon.
pub fn fix_pronunciations(lexicon: &Lexicon, seed: u64) -> PronChoice {
    let index = lexicon
        .entries()
        .map(|(w, prons)| {
            let i = if prons.len() == 1 {
                0
            } else {
                rng_for(seed, &format!("pron:{w}")).random_range(0..prons.len())
            };
            (w.to_string(), i)
        })
        .collect();
    PronChoice { seed, index }
}

/// Reserved symbols, `<eow>`, then the lexicon phonemes sorted.
pub fn build_phoneme_inventory(lexicon: &Lexicon) -> UnitInventory {
    UnitInventory::with_reserved(UnitKind::Phoneme, lexicon.phonemes())
        .expect("lexicon phonemes are unique and never reserved")
}

/// Per word: the chosen pronunciation then `<eow>`; words outside the
/// lexicon become `<unk> <eow>`.
pub fn encode_phonemes(
    words: &[String],
    lexicon: &Lexicon,
    choice: &PronChoice,
    inventory: &UnitInventory,
) -> UnitSequence {
    let mut out = Vec::new();
    for w in words {
        match lexicon.pronunciations(w) {
            Some(prons) => {
                let pron = &prons[choice.get(w).unwrap_or(0).min(prons.len() - 1)];
                out.extend(pron.iter().map(|p| inventory.id(p).unwrap_or(UNK)));
            }
            None => out.push(UNK),
        }
        out.push(BOUNDARY);
    }
    out
}

/// Lexicon, fixed pronunciations and the derived inventory, bundled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeCodec {
    pub inventory: UnitInventory,
    pub lexicon: Lexicon,
    pub choice: PronChoice,
}

impl PhonemeCodec {
    pub fn new(lexicon: Lexicon, choice: PronChoice) -> Self {
        Self {
            inventory: build_phoneme_inventory(&lexicon),
            lexicon,
            choice,
        }
    }

    pub fn encode(&self, words: &[String]) -> UnitSequence {
        encode_phonemes(words, &self.lexicon, &self.choice, &self.inventory)
    }

    /// Auxiliary target of one word: its phonemes then `<eow>`.
    pub fn encode_word(&self, word: &str) -> UnitSequence {
        self.encode(std::slice::from_ref(&word.to_string()))
    }
}
