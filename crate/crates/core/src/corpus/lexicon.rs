use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Pronunciation dictionary: word → pronunciations in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<Vec<String>>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a pronunciation. Duplicate pronunciations of the same word are
    /// kept once.
    pub fn add(&mut self, word: &str, pron: Vec<String>) -> Result<(), CorpusError> {
        if pron.is_empty() {
            return Err(CorpusError::Lexicon(format!("`{word}` has an empty pronunciation")));
        }
        let prons = self.entries.entry(word.to_uppercase()).or_default();
        if !prons.contains(&pron) {
            prons.push(pron);
        }
        Ok(())
    }

    pub fn pronunciations(&self, word: &str) -> Option<&[Vec<String>]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[Vec<String>])> {
        self.entries.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted set of phonemes used by any pronunciation.
    pub fn phonemes(&self) -> BTreeSet<String> {
        self.entries.values().flatten().flatten().cloned().collect()
    }

    /// Sub-lexicon keeping only words accepted by `keep`.
    pub fn restrict<F: Fn(&str) -> bool>(&self, keep: F) -> Lexicon {
        Lexicon {
            entries: self
                .entries
                .iter()
                .filter(|(w, _)| keep(w))
                .map(|(w, p)| (w.clone(), p.clone()))
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, prons) in &self.entries {
            for p in prons {
                writeln!(out, "{w} {}", p.join(" ")).unwrap();
            }
        }
        out
    }
}

/// Parses the LibriSpeech lexicon layout: `WORD PH1 PH2 ...`, one pronunciation
/// per line, repeated words allowed.
pub fn parse_lexicon(text: &str) -> Result<Lexicon, CorpusError> {
    let mut lex = Lexicon::new();
    for (i, line) in text.lines().enumerate() {
        let mut toks = line.split_whitespace();
        let Some(word) = toks.next() else { continue };
        let pron: Vec<String> = toks.map(str::to_string).collect();
        if pron.is_empty() {
            return Err(CorpusError::Parse {
                line: i + 1,
                msg: format!("word `{word}` has no phonemes"),
            });
        }
        lex.add(word, pron)?;
    }
    Ok(lex)
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_lexicon(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_entry() {
        let lex = parse_lexicon("CAT K AE T\n").unwrap();
        assert_eq!(
            lex.pronunciations("CAT").unwrap(),
            &[vec!["K".to_string(), "AE".into(), "T".into()]]
        );
    }

    #[test]
    fn repeated_word_keeps_file_order() {
        let lex = parse_lexicon("READ R EH D\nREAD R IY D\n").unwrap();
        let prons = lex.pronunciations("READ").unwrap();
        assert_eq!(prons.len(), 2);
        assert_eq!(prons[0][1], "EH");
        assert_eq!(prons[1][1], "IY");
    }

    #[test]
    fn word_without_phonemes_is_error() {
        assert!(matches!(
            parse_lexicon("DOG D AO G\nCAT\n"),
            Err(CorpusError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn text_round_trip() {
        let lex = parse_lexicon("B B IY\nA AH\nA EY\n").unwrap();
        assert_eq!(parse_lexicon(&lex.to_text()).unwrap(), lex);
    }
}
