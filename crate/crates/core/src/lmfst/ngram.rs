//! Word n-gram LM with interpolated absolute discounting.
//!
//! For a stored context `h` with counts `c(h, w)`:
//!
//! ```text
//! p(w | h) = max(c(h,w) - d, 0) / c(h) + α(h) · p(w | h')
//! α(h)     = d · N1+(h ·) / c(h)
//! ```
//!
//! where `h'` drops the oldest word. The unigram level interpolates the
//! discounted counts with a uniform distribution over the vocabulary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type WordId = u32;

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
/// Stand-in for any word outside the vocabulary.
const OOV: WordId = WordId::MAX;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("n-gram order must be at least 1")]
    BadOrder,
    #[error("training text is empty")]
    EmptyText,
    #[error("discount must lie in (0, 1), got {0}")]
    BadDiscount(f64),
    #[error("ARPA line {line}: {msg}")]
    Arpa { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NGramConfig {
    pub order: usize,
    pub discount: f64,
    /// Model `</s>` as a predicted token. Without it every state is final
    /// at no cost.
    pub sentence_end: bool,
}

impl Default for NGramConfig {
    fn default() -> Self {
        Self {
            order: 3,
            discount: 0.75,
            sentence_end: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ContextEntry {
    /// Interpolated probability for every word seen after this context.
    pub probs: BTreeMap<WordId, f64>,
    pub backoff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NGramLm {
    order: usize,
    sentence_end: bool,
    /// Index 0 is `<s>`; `</s>` (if modelled) is 1. Remaining ids are words.
    vocab: Vec<String>,
    index: BTreeMap<String, WordId>,
    contexts: BTreeMap<Vec<WordId>, ContextEntry>,
    /// Probability assigned to words outside the vocabulary.
    floor: f64,
}

impl NGramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn models_sentence_end(&self) -> bool {
        self.sentence_end
    }

    pub fn bos(&self) -> WordId {
        0
    }

    pub fn eos(&self) -> Option<WordId> {
        self.sentence_end.then_some(1)
    }

    pub fn word_id(&self, word: &str) -> Option<WordId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.vocab[id as usize]
    }

    /// Predictable tokens: words plus `</s>` when modelled.
    pub fn predictable(&self) -> impl Iterator<Item = WordId> + '_ {
        (1..self.vocab.len() as WordId).filter(move |&i| i != 0)
    }

    /// Plain words (no `<s>`, no `</s>`), sorted by id.
    pub fn words(&self) -> impl Iterator<Item = (WordId, &str)> {
        let start = if self.sentence_end { 2 } else { 1 };
        self.vocab
            .iter()
            .enumerate()
            .skip(start)
            .map(|(i, w)| (i as WordId, w.as_str()))
    }

    pub(crate) fn contexts(&self) -> &BTreeMap<Vec<WordId>, ContextEntry> {
        &self.contexts
    }

    /// Longest stored suffix of `history` (at most `order - 1` words).
    pub fn state_context<'a>(&self, history: &'a [WordId]) -> &'a [WordId] {
        let keep = history.len().min(self.order.saturating_sub(1));
        let mut h = &history[history.len() - keep..];
        while !h.is_empty() && !self.contexts.contains_key(h) {
            h = &h[1..];
        }
        h
    }

    /// p(w | history), backing off through unstored contexts.
    pub fn prob(&self, history: &[WordId], w: WordId) -> f64 {
        if w == OOV {
            return self.floor;
        }
        let keep = history.len().min(self.order.saturating_sub(1));
        self.prob_rec(&history[history.len() - keep..], w)
    }

    fn prob_rec(&self, h: &[WordId], w: WordId) -> f64 {
        match self.contexts.get(h) {
            Some(entry) => match entry.probs.get(&w) {
                Some(&p) => p,
                None if h.is_empty() => self.floor,
                None => entry.backoff * self.prob_rec(&h[1..], w),
            },
            None if h.is_empty() => self.floor,
            None => self.prob_rec(&h[1..], w),
        }
    }

    pub fn backoff(&self, context: &[WordId]) -> f64 {
        self.contexts.get(context).map_or(1.0, |e| e.backoff)
    }

    fn ids(&self, words: &[String]) -> Vec<WordId> {
        words.iter().map(|w| self.word_id(w).unwrap_or(OOV)).collect()
    }

    /// Natural-log probability of a sentence, including `</s>` when modelled.
    pub fn logprob(&self, words: &[String]) -> f64 {
        let ids = self.ids(words);
        let mut history = vec![self.bos()];
        let mut total = 0.0;
        for &w in &ids {
            total += self.prob(&history, w).ln();
            history.push(w);
        }
        if let Some(eos) = self.eos() {
            total += self.prob(&history, eos).ln();
        }
        total
    }

    pub fn to_arpa(&self) -> String {
        let mut by_order: Vec<Vec<(Vec<WordId>, f64, Option<f64>)>> = vec![Vec::new(); self.order];
        for (ctx, entry) in &self.contexts {
            for (&w, &p) in &entry.probs {
                let mut gram = ctx.clone();
                gram.push(w);
                let bo = self.contexts.get(&gram).map(|e| e.backoff);
                by_order[gram.len() - 1].push((gram, p, bo));
            }
        }
        // <s> is a context, never predicted
        if let Some(e) = self.contexts.get(&vec![self.bos()]) {
            by_order[0].push((vec![self.bos()], 0.0, Some(e.backoff)));
        }
        for grams in &mut by_order {
            grams.sort_by(|a, b| a.0.cmp(&b.0));
        }
        let mut out = String::new();
        writeln!(out, "\\data\\").unwrap();
        for (n, grams) in by_order.iter().enumerate() {
            writeln!(out, "ngram {}={}", n + 1, grams.len()).unwrap();
        }
        writeln!(out, "floor={}", self.floor.log10()).unwrap();
        for (n, grams) in by_order.iter().enumerate() {
            writeln!(out, "\n\\{}-grams:", n + 1).unwrap();
            for (gram, p, bo) in grams {
                let lp = if gram == &[self.bos()] { -99.0 } else { p.log10() };
                let words: Vec<&str> = gram.iter().map(|&i| self.word(i)).collect();
                match bo {
                    Some(b) => writeln!(out, "{lp}\t{}\t{}", words.join(" "), b.log10()).unwrap(),
                    None => writeln!(out, "{lp}\t{}", words.join(" ")).unwrap(),
                }
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn save_arpa(&self, path: &Path) -> Result<(), LmError> {
        std::fs::write(path, self.to_arpa()).map_err(|e| LmError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load_arpa(path: &Path) -> Result<Self, LmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LmError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse_arpa(&text)
    }

    pub fn parse_arpa(text: &str) -> Result<Self, LmError> {
        let err = |line: usize, msg: &str| LmError::Arpa {
            line,
            msg: msg.to_string(),
        };
        let mut grams: Vec<(usize, Vec<String>, f64, Option<f64>)> = Vec::new();
        let mut order = 0;
        let mut floor = None;
        let mut current = 0usize;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let l = line.trim();
            if l.is_empty() || l == "\\data\\" || l == "\\end\\" || l.starts_with("ngram ") {
                continue;
            }
            if let Some(f) = l.strip_prefix("floor=") {
                floor = Some(10f64.powf(f.parse().map_err(|_| err(line_no, "bad floor"))?));
                continue;
            }
            if let Some(n) = l.strip_prefix('\\').and_then(|r| r.strip_suffix("-grams:")) {
                current = n.parse().map_err(|_| err(line_no, "bad section"))?;
                order = order.max(current);
                continue;
            }
            if current == 0 {
                return Err(err(line_no, "entry outside an n-gram section"));
            }
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(err(line_no, "expected `logp<TAB>words[<TAB>backoff]`"));
            }
            let lp: f64 = fields[0].parse().map_err(|_| err(line_no, "bad log-prob"))?;
            let words: Vec<String> = fields[1].split(' ').map(str::to_string).collect();
            if words.len() != current {
                return Err(err(line_no, "n-gram length does not match section"));
            }
            let bo = match fields.get(2) {
                Some(b) => Some(10f64.powf(b.parse().map_err(|_| err(line_no, "bad backoff"))?)),
                None => None,
            };
            grams.push((current, words, 10f64.powf(lp), bo));
        }
        if order == 0 {
            return Err(err(0, "no n-gram sections"));
        }
        let sentence_end = grams.iter().any(|g| g.0 == 1 && g.1[0] == EOS_TOKEN);
        let mut vocab = vec![BOS_TOKEN.to_string()];
        if sentence_end {
            vocab.push(EOS_TOKEN.to_string());
        }
        let mut words: Vec<&String> = grams
            .iter()
            .filter(|g| g.0 == 1 && g.1[0] != BOS_TOKEN && g.1[0] != EOS_TOKEN)
            .map(|g| &g.1[0])
            .collect();
        words.sort();
        words.dedup();
        vocab.extend(words.into_iter().cloned());
        let index: BTreeMap<String, WordId> =
            vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as WordId)).collect();
        let mut contexts: BTreeMap<Vec<WordId>, ContextEntry> = BTreeMap::new();
        for (_, gram, p, bo) in &grams {
            let ids: Vec<WordId> = gram
                .iter()
                .map(|w| index.get(w).copied().ok_or_else(|| err(0, &format!("unknown word `{w}`"))))
                .collect::<Result<_, _>>()?;
            if let Some(b) = bo {
                contexts
                    .entry(ids.clone())
                    .or_insert_with(|| ContextEntry {
                        probs: BTreeMap::new(),
                        backoff: 1.0,
                    })
                    .backoff = *b;
            }
            if ids == [0] {
                continue;
            }
            let (ctx, w) = ids.split_at(ids.len() - 1);
            contexts
                .entry(ctx.to_vec())
                .or_insert_with(|| ContextEntry {
                    probs: BTreeMap::new(),
                    backoff: 1.0,
                })
                .probs
                .insert(w[0], *p);
        }
        let floor = floor.unwrap_or(0.0);
        Ok(NGramLm {
            order,
            sentence_end,
            vocab,
            index,
            contexts,
            floor,
        })
    }
}

/// Estimates an LM from word sentences. `<s>`/`</s>` are added per sentence.
pub fn train_ngram(text: &[Vec<String>], config: &NGramConfig) -> Result<NGramLm, LmError> {
    if config.order < 1 {
        return Err(LmError::BadOrder);
    }
    if !(config.discount > 0.0 && config.discount < 1.0) {
        return Err(LmError::BadDiscount(config.discount));
    }
    if text.iter().all(|s| s.is_empty()) && !config.sentence_end {
        return Err(LmError::EmptyText);
    }
    if text.is_empty() {
        return Err(LmError::EmptyText);
    }
    let d = config.discount;
    let mut vocab = vec![BOS_TOKEN.to_string()];
    if config.sentence_end {
        vocab.push(EOS_TOKEN.to_string());
    }
    let mut words: Vec<&String> = text.iter().flatten().collect();
    words.sort();
    words.dedup();
    vocab.extend(words.into_iter().cloned());
    let index: BTreeMap<String, WordId> =
        vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as WordId)).collect();

    // counts[h][w] for all |h| < order
    let mut counts: BTreeMap<Vec<WordId>, BTreeMap<WordId, f64>> = BTreeMap::new();
    for sentence in text {
        let mut seq = vec![0];
        seq.extend(sentence.iter().map(|w| index[w]));
        if config.sentence_end {
            seq.push(1);
        }
        for pos in 1..seq.len() {
            let w = seq[pos];
            for n in 0..config.order {
                if n > pos {
                    break;
                }
                let h = seq[pos - n..pos].to_vec();
                *counts.entry(h).or_default().entry(w).or_default() += 1.0;
            }
        }
    }

    let num_predictable = (vocab.len() - 1) as f64;
    let unigram = counts.get(&Vec::new()).cloned().unwrap_or_default();
    let total: f64 = unigram.values().sum();
    let types = unigram.len() as f64;
    let uniform_mass = d * types / total;
    let floor = uniform_mass / num_predictable;

    let mut contexts: BTreeMap<Vec<WordId>, ContextEntry> = BTreeMap::new();
    let mut uni = BTreeMap::new();
    for w in 1..vocab.len() as WordId {
        let c = unigram.get(&w).copied().unwrap_or(0.0);
        uni.insert(w, (c - d).max(0.0) / total + floor);
    }
    contexts.insert(
        Vec::new(),
        ContextEntry {
            probs: uni,
            backoff: 1.0,
        },
    );

    // shorter contexts first so lower orders are complete when needed
    let mut ordered: Vec<(&Vec<WordId>, &BTreeMap<WordId, f64>)> =
        counts.iter().filter(|(h, _)| !h.is_empty()).collect();
    ordered.sort_by_key(|(h, _)| h.len());
    for (h, next) in ordered {
        let c_h: f64 = next.values().sum();
        let alpha = d * next.len() as f64 / c_h;
        let lower = &h[1..];
        let mut probs = BTreeMap::new();
        for (&w, &c) in next {
            let p_lower = lower_prob(&contexts, lower, w, floor);
            probs.insert(w, (c - d).max(0.0) / c_h + alpha * p_lower);
        }
        contexts.insert(h.clone(), ContextEntry { probs, backoff: alpha });
    }

    Ok(NGramLm {
        order: config.order,
        sentence_end: config.sentence_end,
        vocab,
        index,
        contexts,
        floor,
    })
}

fn lower_prob(contexts: &BTreeMap<Vec<WordId>, ContextEntry>, h: &[WordId], w: WordId, floor: f64) -> f64 {
    match contexts.get(h) {
        Some(e) => match e.probs.get(&w) {
            Some(&p) => p,
            None if h.is_empty() => floor,
            None => e.backoff * lower_prob(contexts, &h[1..], w, floor),
        },
        None if h.is_empty() => floor,
        None => lower_prob(contexts, &h[1..], w, floor),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sents(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn bigram_hand_computed() {
        let lm = train_ngram(&sents(&["a b", "a c"]), &NGramConfig { order: 2, ..Default::default() }).unwrap();
        // unigram over {a, b, c, </s>}: counts 2, 1, 1, 2; N = 6; 4 types
        let floor = 0.75 * 4.0 / 6.0 / 4.0;
        let p1_b = (1.0 - 0.75) / 6.0 + floor;
        // context `a`: c(a)=2, two continuation types
        let alpha_a = 0.75 * 2.0 / 2.0;
        let expected = (1.0 - 0.75) / 2.0 + alpha_a * p1_b;
        let a = lm.word_id("a").unwrap();
        let b = lm.word_id("b").unwrap();
        assert!((lm.prob(&[a], b) - expected).abs() < 1e-12);
        assert!((expected - 0.25).abs() < 1e-12);
    }

    #[test]
    fn one_word_vocabulary_is_certain() {
        let cfg = NGramConfig { order: 3, sentence_end: false, ..Default::default() };
        let lm = train_ngram(&sents(&["w w", "w"]), &cfg).unwrap();
        let w = lm.word_id("w").unwrap();
        for h in [vec![], vec![0], vec![0, w], vec![w, w]] {
            assert_eq!(lm.prob(&h, w), 1.0);
        }
        assert_eq!(lm.logprob(&["w".into(), "w".into(), "w".into()]), 0.0);
    }

    #[test]
    fn normalized_on_random_contexts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vocab = ["a", "b", "c", "d", "e"];
        let text: Vec<Vec<String>> = (0..60)
            .map(|_| {
                let n = rng.random_range(1..6);
                (0..n).map(|_| vocab[rng.random_range(0..5)].to_string()).collect()
            })
            .collect();
        let lm = train_ngram(&text, &NGramConfig::default()).unwrap();
        let ids: Vec<WordId> = lm.predictable().collect();
        for _ in 0..100 {
            let len = rng.random_range(0..3);
            let mut h = vec![0];
            for _ in 0..len {
                h.push(ids[rng.random_range(0..ids.len())]);
            }
            if h.len() > 1 && Some(h[h.len() - 1]) == lm.eos() {
                continue;
            }
            let s: f64 = ids.iter().map(|&w| lm.prob(&h, w)).sum();
            assert!((s - 1.0).abs() < 1e-6, "context {h:?} sums to {s}");
        }
    }

    #[test]
    fn appending_decreases_logprob() {
        let cfg = NGramConfig { sentence_end: false, ..Default::default() };
        let lm = train_ngram(&sents(&["a b c", "b c a", "c a"]), &cfg).unwrap();
        let mut s: Vec<String> = vec!["a".into()];
        let mut prev = lm.logprob(&s);
        for w in ["b", "c", "a", "a"] {
            s.push(w.into());
            let cur = lm.logprob(&s);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn unseen_word_hits_floor() {
        let lm = train_ngram(&sents(&["a b"]), &NGramConfig::default()).unwrap();
        let lp = lm.logprob(&["zzz".into()]);
        assert!(lp.is_finite());
        assert!(lp < lm.logprob(&["a".into()]));
    }

    #[test]
    fn order_zero_rejected() {
        assert!(matches!(
            train_ngram(&sents(&["a"]), &NGramConfig { order: 0, ..Default::default() }),
            Err(LmError::BadOrder)
        ));
    }

    #[test]
    fn arpa_round_trip_preserves_probabilities() {
        let text = sents(&["a b c", "b c a", "c a", "a a b"]);
        let lm = train_ngram(&text, &NGramConfig::default()).unwrap();
        let again = NGramLm::parse_arpa(&lm.to_arpa()).unwrap();
        for s in &text {
            assert!((lm.logprob(s) - again.logprob(s)).abs() < 1e-9);
        }
        assert_eq!(again.to_arpa(), NGramLm::parse_arpa(&again.to_arpa()).unwrap().to_arpa());
    }
}
