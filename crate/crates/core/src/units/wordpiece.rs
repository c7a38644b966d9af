//! Byte-pair-style word-piece training with greedy longest-match encoding.
//!
//! Every word is seen as `_` followed by its characters; merges that absorb
//! the marker yield word-initial pieces such as `_TH`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, UnitError, UnitId, UnitInventory, UnitKind, UnitSequence, EOS, SOS, UNK, UNK_WORD, WORD_MARKER};
use crate::corpus::Corpus;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "WordPieceRepr", into = "WordPieceRepr")]
pub struct WordPieceModel {
    inventory: UnitInventory,
    merges: Vec<(String, String)>,
    max_piece_chars: usize,
}

#[derive(Serialize, Deserialize)]
struct WordPieceRepr {
    inventory: UnitInventory,
    merges: Vec<(String, String)>,
}

impl From<WordPieceRepr> for WordPieceModel {
    fn from(r: WordPieceRepr) -> Self {
        WordPieceModel::new(r.inventory, r.merges)
    }
}

impl From<WordPieceModel> for WordPieceRepr {
    fn from(m: WordPieceModel) -> Self {
        WordPieceRepr {
            inventory: m.inventory,
            merges: m.merges,
        }
    }
}

impl WordPieceModel {
    fn new(inventory: UnitInventory, merges: Vec<(String, String)>) -> Self {
        let max_piece_chars = inventory.symbols().iter().map(|s| s.chars().count()).max().unwrap_or(1);
        Self {
            inventory,
            merges,
            max_piece_chars,
        }
    }

    pub fn inventory(&self) -> &UnitInventory {
        &self.inventory
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn to_text(&self) -> String {
        let mut out = self.inventory.to_text();
        out.push_str("#MERGES\n");
        for (a, b) in &self.merges {
            writeln!(out, "{a} {b}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, UnitError> {
        let mut lines = text.lines();
        let pieces: Vec<String> = lines
            .by_ref()
            .take_while(|l| *l != "#MERGES")
            .map(str::to_string)
            .collect();
        let inventory = UnitInventory::from_symbols(UnitKind::Wordpiece, pieces)?;
        let merges = lines
            .map(|l| {
                let mut it = l.split(' ');
                match (it.next(), it.next(), it.next()) {
                    (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                        Ok((a.to_string(), b.to_string()))
                    }
                    _ => Err(UnitError::Format(format!("bad merge line `{l}`"))),
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self::new(inventory, merges))
    }

    pub fn save(&self, path: &Path) -> Result<(), UnitError> {
        std::fs::write(path, self.to_text()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, UnitError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text)
    }
}

/// Trains merges until the inventory holds `vocab_size` symbols or no pair
/// occurs at least twice. Ties go to the lexicographically smallest pair.
pub fn train_wordpiece(corpus: &Corpus, vocab_size: usize) -> Result<WordPieceModel, UnitError> {
    if corpus.is_empty() {
        return Err(UnitError::EmptyCorpus);
    }
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in corpus.transcripts().flatten() {
        *word_counts.entry(w.as_str()).or_default() += 1;
    }
    let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    // reserved: <s>, </s>, <unk>, `_`
    let minimum = 4 + alphabet.len();
    if vocab_size < minimum {
        return Err(UnitError::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }

    let mut symbols: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    let mut known: BTreeSet<String> = symbols.iter().cloned().collect();
    known.insert(WORD_MARKER.to_string());

    let mut seqs: Vec<(Vec<String>, usize)> = word_counts
        .iter()
        .map(|(w, &n)| {
            let mut s = vec![WORD_MARKER.to_string()];
            s.extend(w.chars().map(String::from));
            (s, n)
        })
        .collect();

    let mut merges = Vec::new();
    while 4 + symbols.len() < vocab_size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (s, n) in &seqs {
            for p in s.windows(2) {
                *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += n;
            }
        }
        // first maximum in lexicographic order
        let Some((&(a, b), &count)) = pairs
            .iter()
            .fold(None, |best: Option<(&(&str, &str), &usize)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
        else {
            break;
        };
        if count < 2 {
            break;
        }
        let (a, b) = (a.to_string(), b.to_string());
        let merged = format!("{a}{b}");
        for (s, _) in seqs.iter_mut() {
            let mut out = Vec::with_capacity(s.len());
            let mut i = 0;
            while i < s.len() {
                if i + 1 < s.len() && s[i] == a && s[i + 1] == b {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut s[i]));
                    i += 1;
                }
            }
            *s = out;
        }
        if known.insert(merged.clone()) {
            symbols.push(merged);
        }
        merges.push((a, b));
    }

    let inventory = UnitInventory::with_reserved(UnitKind::Wordpiece, symbols)?;
    Ok(WordPieceModel::new(inventory, merges))
}

/// Greedy longest match over `_word`; characters outside the inventory become UNK.
pub fn encode_wordpiece(words: &[String], model: &WordPieceModel) -> UnitSequence {
    let inv = &model.inventory;
    let mut out = Vec::new();
    let mut piece = String::new();
    for w in words {
        let chars: Vec<char> = WORD_MARKER.chars().chain(w.chars()).collect();
        let mut i = 0;
        while i < chars.len() {
            let longest = (chars.len() - i).min(model.max_piece_chars.max(1));
            let mut matched = None;
            for len in (1..=longest).rev() {
                piece.clear();
                piece.extend(&chars[i..i + len]);
                if let Some(id) = inv.id(&piece) {
                    if id > UNK {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(UNK);
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn decode_wordpiece(units: &[UnitId], model: &WordPieceModel) -> Vec<String> {
    let inv = &model.inventory;
    let mut words: Vec<String> = Vec::new();
    let mut current: Option<String> = None;
    for &u in units {
        if u == SOS || u == EOS {
            continue;
        }
        let sym = if u == UNK { UNK_WORD } else { inv.symbol(u).unwrap_or(UNK_WORD) };
        if let Some(rest) = sym.strip_prefix(WORD_MARKER) {
            if let Some(w) = current.take() {
                words.push(w);
            }
            current = Some(rest.to_string());
        } else {
            current.get_or_insert_with(String::new).push_str(sym);
        }
    }
    if let Some(w) = current {
        words.push(w);
    }
    words.retain(|w| !w.is_empty());
    words
}
