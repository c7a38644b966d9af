//! Error rates, oracle error rates, OOV rates, N-best diversity and result
//! tables.

mod report;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::NBestList;
use crate::units::{EOW_SYMBOL, UNK_SYMBOL, UNK_WORD};

pub use report::{Cell, Row, Table};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("references are empty")]
    EmptyReferences,
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("evaluation corpus has no tokens")]
    EmptyCorpus,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub hits: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn ref_len(&self) -> usize {
        self.hits + self.substitutions + self.deletions
    }

    pub fn hyp_len(&self) -> usize {
        self.hits + self.substitutions + self.insertions
    }

    fn add(&mut self, o: &EditCounts) {
        self.hits += o.hits;
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Hit,
    Sub,
    Del,
    Ins,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub counts: EditCounts,
    /// Operations from the start of both sequences.
    pub ops: Vec<EditOp>,
}

/// Unknown-word tokens count as errors even against themselves.
fn matches(a: &str, b: &str) -> bool {
    a == b && a != UNK_WORD && a != UNK_SYMBOL
}

/// Unit-cost Levenshtein alignment. Among optimal alignments the backtrace
/// prefers, at every cell, hit, then substitution, deletion, insertion.
pub fn align<R: AsRef<str>, H: AsRef<str>>(reference: &[R], hypothesis: &[H]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let same = matches(reference[i - 1].as_ref(), hypothesis[j - 1].as_ref());
            let diag = d[(i - 1) * w + j - 1] + usize::from(!same);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut ops = Vec::with_capacity(n.max(m));
    let mut counts = EditCounts::default();
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diag = d[(i - 1) * w + j - 1];
            if matches(reference[i - 1].as_ref(), hypothesis[j - 1].as_ref()) && diag == here {
                ops.push(EditOp::Hit);
                counts.hits += 1;
                i -= 1;
                j -= 1;
                continue;
            }
            if diag + 1 == here {
                ops.push(EditOp::Sub);
                counts.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(EditOp::Del);
            counts.deletions += 1;
            i -= 1;
        } else {
            ops.push(EditOp::Ins);
            counts.insertions += 1;
            j -= 1;
        }
    }
    ops.reverse();
    Alignment { counts, ops }
}

pub fn edit_distance<R: AsRef<str>, H: AsRef<str>>(reference: &[R], hypothesis: &[H]) -> usize {
    align(reference, hypothesis).counts.errors()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRate {
    pub rate: f64,
    pub total: EditCounts,
    pub per_utterance: Vec<EditCounts>,
}

impl ErrorRate {
    pub fn percent(&self) -> f64 {
        100.0 * self.rate
    }
}

fn error_rate<R: AsRef<str>, H: AsRef<str>>(refs: &[Vec<R>], hyps: &[Vec<H>]) -> Result<ErrorRate, EvalError> {
    if refs.len() != hyps.len() {
        return Err(EvalError::LengthMismatch { refs: refs.len(), hyps: hyps.len() });
    }
    let mut total = EditCounts::default();
    let per_utterance: Vec<EditCounts> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| {
            let c = align(r, h).counts;
            total.add(&c);
            c
        })
        .collect();
    if total.ref_len() == 0 {
        return Err(EvalError::EmptyReferences);
    }
    Ok(ErrorRate { rate: total.errors() as f64 / total.ref_len() as f64, total, per_utterance })
}

/// Word error rate, (S + D + I) / Σ|ref|.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[Vec<R>], hyps: &[Vec<H>]) -> Result<ErrorRate, EvalError> {
    error_rate(refs, hyps)
}

/// Phoneme error rate over symbol strings; `<eow>` is not scored.
pub fn per<R: AsRef<str>, H: AsRef<str>>(refs: &[Vec<R>], hyps: &[Vec<H>]) -> Result<ErrorRate, EvalError> {
    error_rate(&strip_eow(refs), &strip_eow(hyps))
}

fn strip_eow<T: AsRef<str>>(seqs: &[Vec<T>]) -> Vec<Vec<&str>> {
    seqs.iter()
        .map(|s| s.iter().map(AsRef::as_ref).filter(|x| *x != EOW_SYMBOL).collect())
        .collect()
}

/// Error rate of the best per-utterance choice from each list. An empty list
/// counts as the empty hypothesis.
pub fn oracle_wer<R: AsRef<str>>(lists: &[NBestList], refs: &[Vec<R>]) -> Result<f64, EvalError> {
    Ok(oracle_errors(lists, refs)?.iter().sum::<usize>() as f64 / ref_tokens(refs)? as f64)
}

/// Minimum edit errors per utterance over its list.
pub fn oracle_errors<R: AsRef<str>>(lists: &[NBestList], refs: &[Vec<R>]) -> Result<Vec<usize>, EvalError> {
    if lists.len() != refs.len() {
        return Err(EvalError::LengthMismatch { refs: refs.len(), hyps: lists.len() });
    }
    Ok(lists
        .iter()
        .zip(refs)
        .map(|(l, r)| l.hyps.iter().map(|h| edit_distance(r, &h.words)).min().unwrap_or(r.len()))
        .collect())
}

fn ref_tokens<R>(refs: &[Vec<R>]) -> Result<usize, EvalError> {
    match refs.iter().map(Vec::len).sum() {
        0 => Err(EvalError::EmptyReferences),
        n => Ok(n),
    }
}

/// Percentage of running tokens not covered by `known`.
pub fn oov_rate<'a, I, F>(sentences: I, known: F) -> Result<f64, EvalError>
where
    I: IntoIterator<Item = &'a [String]>,
    F: Fn(&str) -> bool,
{
    let (mut total, mut missing) = (0usize, 0usize);
    for s in sentences {
        for w in s {
            total += 1;
            missing += usize::from(!known(w));
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(100.0 * missing as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListDiversity {
    pub distinct: usize,
    /// Mean word edit distance over unordered hypothesis pairs.
    pub mean_pairwise: f64,
    /// For each word of the 1-best, how many different words the list puts
    /// there (hits and substitutions against the 1-best).
    pub position_sets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub lists: Vec<ListDiversity>,
    pub mean_distinct: f64,
    pub mean_pairwise: f64,
    /// Positions where the list disagrees with its 1-best.
    pub disagreement_positions: usize,
    /// Mean substitution-set size over those positions.
    pub mean_set_size: f64,
}

pub fn list_diversity(list: &NBestList) -> ListDiversity {
    let hyps = &list.hyps;
    let distinct = hyps.iter().map(|h| &h.words).collect::<BTreeSet<_>>().len();
    let mut pairs = 0usize;
    let mut dist = 0usize;
    for i in 0..hyps.len() {
        for j in i + 1..hyps.len() {
            pairs += 1;
            dist += edit_distance(&hyps[i].words, &hyps[j].words);
        }
    }
    let position_sets = match hyps.first() {
        None => Vec::new(),
        Some(best) => {
            let mut sets: Vec<BTreeSet<&str>> = best.words.iter().map(|w| BTreeSet::from([w.as_str()])).collect();
            for h in &hyps[1..] {
                let (mut i, mut j) = (0, 0);
                for op in align(&best.words, &h.words).ops {
                    match op {
                        EditOp::Hit | EditOp::Sub => {
                            sets[i].insert(&h.words[j]);
                            i += 1;
                            j += 1;
                        }
                        EditOp::Del => i += 1,
                        EditOp::Ins => j += 1,
                    }
                }
            }
            sets.iter().map(BTreeSet::len).collect()
        }
    };
    ListDiversity {
        distinct,
        mean_pairwise: if pairs == 0 { 0.0 } else { dist as f64 / pairs as f64 },
        position_sets,
    }
}

pub fn nbest_diversity(lists: &[NBestList]) -> DiversityReport {
    let per: Vec<ListDiversity> = lists.iter().map(list_diversity).collect();
    let n = per.len().max(1) as f64;
    let wide: Vec<usize> = per.iter().flat_map(|d| d.position_sets.iter().copied().filter(|&s| s > 1)).collect();
    DiversityReport {
        mean_distinct: per.iter().map(|d| d.distinct as f64).sum::<f64>() / n,
        mean_pairwise: per.iter().map(|d| d.mean_pairwise).sum::<f64>() / n,
        disagreement_positions: wide.len(),
        mean_set_size: if wide.is_empty() { 0.0 } else { wide.iter().sum::<usize>() as f64 / wide.len() as f64 },
        lists: per,
    }
}

/// Per-utterance alignment listing for debugging:
///
/// ```text
/// UTT id S=1 D=0 I=1
/// REF a b  c ***
/// HYP a x  c d
/// ```
pub fn alignment_dump<R: AsRef<str>, H: AsRef<str>>(ids: &[String], refs: &[Vec<R>], hyps: &[Vec<H>]) -> String {
    let mut out = String::new();
    for ((id, r), h) in ids.iter().zip(refs).zip(hyps) {
        let a = align(r, h);
        let (mut i, mut j) = (0, 0);
        let (mut top, mut bottom) = (Vec::new(), Vec::new());
        for op in &a.ops {
            let (x, y) = match op {
                EditOp::Hit | EditOp::Sub => {
                    i += 1;
                    j += 1;
                    (r[i - 1].as_ref(), h[j - 1].as_ref())
                }
                EditOp::Del => {
                    i += 1;
                    (r[i - 1].as_ref(), "***")
                }
                EditOp::Ins => {
                    j += 1;
                    ("***", h[j - 1].as_ref())
                }
            };
            let width = x.chars().count().max(y.chars().count());
            top.push(format!("{x:width$}"));
            bottom.push(format!("{y:width$}"));
        }
        let c = a.counts;
        let _ = writeln!(out, "UTT {id} S={} D={} I={}", c.substitutions, c.deletions, c.insertions);
        let _ = writeln!(out, "REF {}", top.join(" ").trim_end());
        let _ = writeln!(out, "HYP {}", bottom.join(" ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn basic_rates() {
        assert_eq!(wer(&[w("a b c")], &[w("a b c")]).unwrap().rate, 0.0);
        assert_eq!(wer(&[w("a b c")], &[w("a x c")]).unwrap().rate, 1.0 / 3.0);
        let r = wer(&[w("a b")], &[w("")]).unwrap();
        assert_eq!(r.rate, 1.0);
        assert_eq!(r.total.deletions, 2);
        assert!(matches!(wer::<String, String>(&[], &[]), Err(EvalError::EmptyReferences)));
        assert!(wer(&[w("a")], &[w("a"), w("b")]).is_err());
    }

    #[test]
    fn unknown_words_never_match() {
        let r = wer(&[w("a <UNK>")], &[w("a <UNK>")]).unwrap();
        assert_eq!(r.total.substitutions, 1);
    }

    #[test]
    fn per_ignores_word_ends() {
        let r = per(&[w("K AE T <eow>")], &[w("K AA T <eow>")]).unwrap();
        assert_eq!(r.rate, 1.0 / 3.0);
        assert_eq!(per(&[w("K <eow>")], &[w("K <eow>")]).unwrap().rate, 0.0);
    }

    #[test]
    fn canonical_alignment_prefers_substitution_over_gaps() {
        let a = align(&w("a b"), &w("b a"));
        assert_eq!(a.ops, vec![EditOp::Sub, EditOp::Sub]);
        let a = align(&w("a"), &w("b c"));
        assert_eq!(a.ops, vec![EditOp::Ins, EditOp::Sub]);
    }

    #[test]
    fn oov_examples() {
        let known = ["a", "b"];
        let s = [w("a c b c")];
        assert_eq!(oov_rate(s.iter().map(Vec::as_slice), |x| known.contains(&x)).unwrap(), 50.0);
        assert_eq!(oov_rate([w("a b").as_slice()], |x| known.contains(&x)).unwrap(), 0.0);
        assert!(oov_rate(std::iter::empty::<&[String]>(), |_| true).is_err());
    }

    #[test]
    fn dump_lines_up_columns() {
        let d = alignment_dump(&["u1".into()], &[w("a bb c")], &[w("a x c d")]);
        assert_eq!(d, "UTT u1 S=1 D=0 I=1\nREF a bb c ***\nHYP a x  c d\n");
    }
}
