use std::collections::BTreeSet;

use super::{UnitError, UnitId, UnitInventory, UnitKind, UnitSequence, BOUNDARY, EOS, SOS, UNK, UNK_WORD};
use crate::corpus::Corpus;

/// Reserved symbols, `_`, then every transcript character in sorted order.
pub fn build_grapheme_inventory(corpus: &Corpus) -> Result<UnitInventory, UnitError> {
    if corpus.is_empty() {
        return Err(UnitError::EmptyCorpus);
    }
    let chars: BTreeSet<char> = corpus.transcripts().flatten().flat_map(|w| w.chars()).collect();
    UnitInventory::with_reserved(UnitKind::Grapheme, chars.into_iter().map(String::from))
}

/// Each word becomes `_` followed by its characters; unknown characters map to UNK.
pub fn encode_graphemes(words: &[String], inventory: &UnitInventory) -> UnitSequence {
    let mut out = Vec::new();
    let mut buf = [0u8; 4];
    for w in words {
        out.push(BOUNDARY);
        for c in w.chars() {
            out.push(inventory.id(c.encode_utf8(&mut buf)).unwrap_or(UNK));
        }
    }
    out
}

/// Splits on `_`; UNK renders as `<UNK>`. SOS/EOS are skipped.
pub fn decode_graphemes(units: &[UnitId], inventory: &UnitInventory) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut current: Option<String> = None;
    for &u in units {
        match u {
            SOS | EOS => {}
            BOUNDARY => {
                if let Some(w) = current.take() {
                    words.push(w);
                }
                current = Some(String::new());
            }
            UNK => current.get_or_insert_with(String::new).push_str(UNK_WORD),
            _ => {
                let s = inventory.symbol(u).unwrap_or(UNK_WORD);
                current.get_or_insert_with(String::new).push_str(s);
            }
        }
    }
    if let Some(w) = current {
        words.push(w);
    }
    words.retain(|w| !w.is_empty());
    words
}
