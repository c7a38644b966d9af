//! Output-unit inventories and word ↔ unit conversion.

mod grapheme;
mod phoneme;
mod wordpiece;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grapheme::{build_grapheme_inventory, decode_graphemes, encode_graphemes};
pub use phoneme::{build_phoneme_inventory, encode_phonemes, fix_pronunciations, PhonemeCodec, PronChoice};
pub use wordpiece::{decode_wordpiece, encode_wordpiece, train_wordpiece, WordPieceModel};

pub type UnitId = u32;
pub type UnitSequence = Vec<UnitId>;

pub const SOS: UnitId = 0;
pub const EOS: UnitId = 1;
pub const UNK: UnitId = 2;
/// Index of `_` (grapheme / word-piece) or `<eow>` (phoneme).
pub const BOUNDARY: UnitId = 3;

pub const SOS_SYMBOL: &str = "<s>";
pub const EOS_SYMBOL: &str = "</s>";
pub const UNK_SYMBOL: &str = "<unk>";
pub const EOW_SYMBOL: &str = "<eow>";
pub const WORD_MARKER: &str = "_";
/// How an UNK unit renders inside a decoded word.
pub const UNK_WORD: &str = "<UNK>";

#[derive(Debug, Error)]
pub enum UnitError {
    #[error("vocabulary size {requested} is below the minimum {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("corpus has no transcripts")]
    EmptyCorpus,
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("unit id {0} is out of range")]
    BadUnit(UnitId),
    #[error("malformed unit file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Grapheme,
    Wordpiece,
    Phoneme,
}

impl UnitKind {
    pub fn name(self) -> &'static str {
        match self {
            UnitKind::Grapheme => "grapheme",
            UnitKind::Wordpiece => "wordpiece",
            UnitKind::Phoneme => "phoneme",
        }
    }

    /// Whether unit sequences decode to words without a lexicon.
    pub fn word_recoverable(self) -> bool {
        !matches!(self, UnitKind::Phoneme)
    }
}

/// Ordered unit symbols. Indices 0..=3 are `<s>`, `</s>`, `<unk>` and the
/// boundary symbol (`_` or `<eow>`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "InventoryRepr", into = "InventoryRepr")]
pub struct UnitInventory {
    kind: UnitKind,
    symbols: Vec<String>,
    index: HashMap<String, UnitId>,
}

#[derive(Serialize, Deserialize)]
struct InventoryRepr {
    kind: UnitKind,
    symbols: Vec<String>,
}

impl TryFrom<InventoryRepr> for UnitInventory {
    type Error = UnitError;
    fn try_from(r: InventoryRepr) -> Result<Self, UnitError> {
        UnitInventory::from_symbols(r.kind, r.symbols)
    }
}

impl From<UnitInventory> for InventoryRepr {
    fn from(inv: UnitInventory) -> Self {
        InventoryRepr {
            kind: inv.kind,
            symbols: inv.symbols,
        }
    }
}

impl UnitInventory {
    /// Reserved symbols followed by `extra` in the given order.
    pub fn with_reserved<I: IntoIterator<Item = String>>(kind: UnitKind, extra: I) -> Result<Self, UnitError> {
        let boundary = match kind {
            UnitKind::Phoneme => EOW_SYMBOL,
            _ => WORD_MARKER,
        };
        let mut symbols: Vec<String> = [SOS_SYMBOL, EOS_SYMBOL, UNK_SYMBOL, boundary]
            .iter()
            .map(|s| s.to_string())
            .collect();
        symbols.extend(extra);
        Self::from_symbols(kind, symbols)
    }

    pub fn from_symbols(kind: UnitKind, symbols: Vec<String>) -> Result<Self, UnitError> {
        let boundary = match kind {
            UnitKind::Phoneme => EOW_SYMBOL,
            _ => WORD_MARKER,
        };
        let expected = [SOS_SYMBOL, EOS_SYMBOL, UNK_SYMBOL, boundary];
        if symbols.len() < 4 || symbols[..4].iter().zip(expected).any(|(a, b)| a != b) {
            return Err(UnitError::Format(format!(
                "first symbols must be {expected:?}"
            )));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as UnitId).is_some() {
                return Err(UnitError::DuplicateSymbol(s.clone()));
            }
        }
        Ok(Self {
            kind,
            symbols,
            index,
        })
    }

    pub fn kind(&self) -> UnitKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<UnitId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: UnitId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn check(&self, units: &[UnitId]) -> Result<(), UnitError> {
        match units.iter().find(|&&u| u as usize >= self.symbols.len()) {
            Some(&u) => Err(UnitError::BadUnit(u)),
            None => Ok(()),
        }
    }

    /// Word-initial units: `_` itself and any `_`-prefixed piece.
    pub fn starts_word(&self, id: UnitId) -> bool {
        self.kind.word_recoverable()
            && self.symbol(id).is_some_and(|s| s.starts_with(WORD_MARKER))
    }

    /// One symbol per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            writeln!(out, "{s}").unwrap();
        }
        out
    }

    pub fn parse(kind: UnitKind, text: &str) -> Result<Self, UnitError> {
        Self::from_symbols(kind, text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), UnitError> {
        std::fs::write(path, self.to_text()).map_err(|e| io_err(path, e))
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> UnitError {
    UnitError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A unit vocabulary together with whatever is needed to map words onto it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitCodec {
    Grapheme(UnitInventory),
    Wordpiece(WordPieceModel),
    Phoneme(PhonemeCodec),
}

impl UnitCodec {
    pub fn inventory(&self) -> &UnitInventory {
        match self {
            UnitCodec::Grapheme(inv) => inv,
            UnitCodec::Wordpiece(m) => m.inventory(),
            UnitCodec::Phoneme(p) => &p.inventory,
        }
    }

    pub fn kind(&self) -> UnitKind {
        self.inventory().kind()
    }

    pub fn encode(&self, words: &[String]) -> UnitSequence {
        convert_hypothesis(words, self)
    }

    /// Words for character-based units; `None` for phonemes.
    pub fn decode(&self, units: &[UnitId]) -> Option<Vec<String>> {
        match self {
            UnitCodec::Grapheme(inv) => Some(decode_graphemes(units, inv)),
            UnitCodec::Wordpiece(m) => Some(decode_wordpiece(units, m)),
            UnitCodec::Phoneme(_) => None,
        }
    }
}

/// Converts a word hypothesis into the units of a target codec.
pub fn convert_hypothesis(words: &[String], target: &UnitCodec) -> UnitSequence {
    match target {
        UnitCodec::Grapheme(inv) => encode_graphemes(words, inv),
        UnitCodec::Wordpiece(m) => encode_wordpiece(words, m),
        UnitCodec::Phoneme(p) => encode_phonemes(words, &p.lexicon, &p.choice, &p.inventory),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_lexicon, Corpus, Split};

    fn corpus(lines: &[&str]) -> Corpus {
        let mut text = String::from("DIM 1\n");
        for (i, l) in lines.iter().enumerate() {
            text.push_str(&format!("UTT u{i}\nREF {l}\nFRAMES 1\n0\n"));
        }
        Corpus::parse(&text, Split::Train).unwrap()
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn reserved_indices_are_fixed() {
        let inv = UnitInventory::with_reserved(UnitKind::Phoneme, vec!["AA".into()]).unwrap();
        assert_eq!(inv.id(SOS_SYMBOL), Some(SOS));
        assert_eq!(inv.id(EOS_SYMBOL), Some(EOS));
        assert_eq!(inv.id(UNK_SYMBOL), Some(UNK));
        assert_eq!(inv.id(EOW_SYMBOL), Some(BOUNDARY));
        assert!(UnitInventory::with_reserved(UnitKind::Grapheme, vec!["_".into()]).is_err());
    }

    #[test]
    fn inventory_file_round_trip() {
        let inv = build_grapheme_inventory(&corpus(&["AB'C"])).unwrap();
        assert_eq!(UnitInventory::parse(UnitKind::Grapheme, &inv.to_text()).unwrap(), inv);
    }

    #[test]
    fn convert_dispatches_to_each_encoder() {
        let c = corpus(&["CAT SAT", "AT"]);
        let ginv = build_grapheme_inventory(&c).unwrap();
        let g = UnitCodec::Grapheme(ginv.clone());
        let w = words("CAT AT");
        assert_eq!(convert_hypothesis(&w, &g), encode_graphemes(&w, &ginv));
        assert_eq!(g.decode(&g.encode(&w)).unwrap(), w);

        let wp = train_wordpiece(&c, 20).unwrap();
        let codec = UnitCodec::Wordpiece(wp.clone());
        assert_eq!(convert_hypothesis(&w, &codec), encode_wordpiece(&w, &wp));
        assert_eq!(codec.decode(&codec.encode(&w)).unwrap(), w);

        let lex = parse_lexicon("CAT K AE T\nAT AE T\n").unwrap();
        let choice = fix_pronunciations(&lex, 1);
        let pinv = build_phoneme_inventory(&lex);
        let p = UnitCodec::Phoneme(PhonemeCodec::new(lex.clone(), choice.clone()));
        assert_eq!(convert_hypothesis(&w, &p), encode_phonemes(&w, &lex, &choice, &pinv));
        assert!(p.decode(&[4]).is_none());
    }
}
