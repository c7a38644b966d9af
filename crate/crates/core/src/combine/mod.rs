//! Log-linear N-best rescoring, weight tuning and union with cross-rescoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use log::warn;
use thiserror::Error;

use crate::corpus::FeatureSequence;
use crate::decode::{Hypothesis, NBestList};
use crate::eval::{edit_distance, EvalError};
use crate::lmfst::{lm_logprob, NGramLm};
use crate::neural::{AuxDecoderModel, LasModel, NeuralError};
use crate::units::{UnitId, UnitSequence, BOUNDARY, UNK};

#[derive(Debug, Error)]
pub enum CombineError {
    #[error("N-best list {0:?} is empty")]
    EmptyList(String),
    #[error("no dev utterances to tune on")]
    EmptyDev,
    #[error("weight grid is empty")]
    EmptyGrid,
    #[error("grid point has {got} weights for {expected} rescorers")]
    GridDim { expected: usize, got: usize },
    #[error("rescorer name {0:?} used twice")]
    DuplicateName(String),
    #[error("no weight for rescorer {0:?}")]
    MissingWeight(String),
    #[error("weight {name}={value} must be finite and non-negative")]
    BadWeight { name: String, value: f64 },
    #[error("N-best lists for different utterances: {a:?} vs {b:?}")]
    UttMismatch { a: String, b: String },
    #[error("{lists} N-best lists for {other} references or feature sets")]
    LengthMismatch { lists: usize, other: usize },
    #[error("{rescorer}: cannot convert {words:?}")]
    Conversion { rescorer: String, words: Vec<String> },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("weights line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CombineError>;

/// A model that assigns a log score to a word hypothesis of an utterance.
pub trait Rescorer {
    fn name(&self) -> &str;

    fn score(&self, features: &FeatureSequence, words: &[String]) -> Result<f64>;

    /// Scores several hypotheses of one utterance.
    fn score_all(&self, features: &FeatureSequence, hyps: &[&[String]]) -> Vec<Result<f64>> {
        hyps.iter().map(|w| self.score(features, w)).collect()
    }
}

/// True when the only content units are `<unk>`: nothing of the
/// hypothesis survived conversion.
fn all_unknown(units: &[UnitId]) -> bool {
    units.contains(&UNK) && units.iter().all(|&u| u == UNK || u == BOUNDARY)
}

/// Rescoring with a LAS model after converting the words into its units.
pub struct LasRescorer<'a> {
    name: String,
    model: &'a LasModel,
}

impl<'a> LasRescorer<'a> {
    pub fn new(name: &str, model: &'a LasModel) -> Self {
        Self { name: name.to_string(), model }
    }

    fn convert(&self, words: &[String]) -> Result<UnitSequence> {
        let units = self.model.codec().encode(words);
        if all_unknown(&units) {
            return Err(CombineError::Conversion { rescorer: self.name.clone(), words: words.to_vec() });
        }
        Ok(units)
    }
}

impl Rescorer for LasRescorer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, features: &FeatureSequence, words: &[String]) -> Result<f64> {
        Ok(self.model.score_sequence(features, &self.convert(words)?)?)
    }

    fn score_all(&self, features: &FeatureSequence, hyps: &[&[String]]) -> Vec<Result<f64>> {
        let converted: Vec<Result<UnitSequence>> = hyps.iter().map(|w| self.convert(w)).collect();
        let ok: Vec<UnitSequence> = converted.iter().filter_map(|c| c.as_ref().ok().cloned()).collect();
        let Ok(scores) = self.model.score_sequences(features, &ok) else {
            // surface the per-hypothesis errors
            return hyps.iter().map(|w| self.score(features, w)).collect();
        };
        let mut scores = scores.into_iter();
        converted
            .into_iter()
            .map(|c| c.map(|_| scores.next().expect("one score per converted hypothesis")))
            .collect()
    }
}

/// Rescoring with the auxiliary decoder of a base model.
pub struct AuxRescorer<'a> {
    name: String,
    model: &'a AuxDecoderModel,
}

impl<'a> AuxRescorer<'a> {
    pub fn new(name: &str, model: &'a AuxDecoderModel) -> Self {
        Self { name: name.to_string(), model }
    }
}

impl Rescorer for AuxRescorer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, features: &FeatureSequence, words: &[String]) -> Result<f64> {
        let base = self.model.base().codec().encode(words);
        let aux: Vec<UnitId> = self.model.aux_targets(words).concat();
        if all_unknown(&base) || all_unknown(&aux) {
            return Err(CombineError::Conversion { rescorer: self.name.clone(), words: words.to_vec() });
        }
        Ok(self.model.aux_score(features, words)?)
    }
}

/// Rescoring with an n-gram LM; the features are ignored.
pub struct NGramRescorer<'a> {
    name: String,
    lm: &'a NGramLm,
}

impl<'a> NGramRescorer<'a> {
    pub fn new(name: &str, lm: &'a NGramLm) -> Self {
        Self { name: name.to_string(), lm }
    }
}

impl Rescorer for NGramRescorer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, _features: &FeatureSequence, words: &[String]) -> Result<f64> {
        Ok(lm_logprob(self.lm, words))
    }
}

/// Interpolation weight per rescorer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CombinationWeights(BTreeMap<String, f64>);

impl CombinationWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<'a, I: IntoIterator<Item = (&'a str, f64)>>(pairs: I) -> Result<Self> {
        let mut w = Self::new();
        for (name, value) in pairs {
            w.set(name, value)?;
        }
        Ok(w)
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() || value < 0.0 {
            return Err(CombineError::BadWeight { name: name.to_string(), value });
        }
        self.0.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// `name=value` lines, sorted by name.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut w = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| CombineError::Parse { line: i + 1, msg: msg.to_string() };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected name=value"))?;
            let v: f64 = v.trim().parse().map_err(|_| err("weight is not a number"))?;
            if w.0.contains_key(k.trim()) {
                return Err(err("duplicate name"));
            }
            w.set(k.trim(), v).map_err(|e| err(&e.to_string()))?;
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|source| CombineError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CombineError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }
}

fn check_names(rescorers: &[&dyn Rescorer]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in rescorers {
        if !seen.insert(r.name()) {
            return Err(CombineError::DuplicateName(r.name().to_string()));
        }
    }
    Ok(())
}

/// Component scores of every hypothesis, `[hyp][rescorer]`. Failures score
/// −∞ with a warning.
pub fn score_components(list: &NBestList, features: &FeatureSequence, rescorers: &[&dyn Rescorer]) -> Vec<Vec<f64>> {
    let words: Vec<&[String]> = list.hyps.iter().map(|h| h.words.as_slice()).collect();
    let mut out = vec![Vec::with_capacity(rescorers.len()); words.len()];
    for r in rescorers {
        let mut failed = Vec::new();
        for (i, s) in r.score_all(features, &words).into_iter().enumerate() {
            out[i].push(s.unwrap_or_else(|e| {
                failed.push(e);
                f64::NEG_INFINITY
            }));
        }
        if let Some(first) = failed.first() {
            warn!(
                "utterance {}: {} of {} hypotheses scored -inf by {} ({first})",
                list.utt_id,
                failed.len(),
                words.len(),
                r.name()
            );
        }
    }
    out
}

/// λ·s with 0·(−∞) = 0, so a zero weight leaves a total untouched.
fn weighted(lambda: f64, s: f64) -> f64 {
    if lambda == 0.0 {
        0.0
    } else {
        lambda * s
    }
}

/// Adds precomputed weighted components to each total and re-sorts stably.
pub fn apply_weights(list: &NBestList, names: &[&str], scores: &[Vec<f64>], weights: &[f64]) -> NBestList {
    let mut out = list.clone();
    for (h, s) in out.hyps.iter_mut().zip(scores) {
        for ((name, &x), &l) in names.iter().zip(s).zip(weights) {
            h.total += weighted(l, x);
            h.components.insert(name.to_string(), x);
        }
    }
    out.sort();
    out
}

fn weight_vector(rescorers: &[&dyn Rescorer], weights: &CombinationWeights) -> Result<Vec<f64>> {
    rescorers
        .iter()
        .map(|r| weights.get(r.name()).ok_or_else(|| CombineError::MissingWeight(r.name().to_string())))
        .collect()
}

/// New total = old total + Σ λ_r · score_r; the list is then re-sorted,
/// keeping the prior order on ties.
pub fn rescore_nbest(
    list: &NBestList,
    features: &FeatureSequence,
    rescorers: &[&dyn Rescorer],
    weights: &CombinationWeights,
) -> Result<NBestList> {
    if list.is_empty() {
        return Err(CombineError::EmptyList(list.utt_id.clone()));
    }
    check_names(rescorers)?;
    let w = weight_vector(rescorers, weights)?;
    let names: Vec<&str> = rescorers.iter().map(|r| r.name()).collect();
    Ok(apply_weights(list, &names, &score_components(list, features, rescorers), &w))
}

/// Rescoring with a grapheme and a phoneme rescorer at once.
pub fn combine_three(
    list: &NBestList,
    features: &FeatureSequence,
    grapheme: &dyn Rescorer,
    phoneme: &dyn Rescorer,
    weights: &CombinationWeights,
) -> Result<NBestList> {
    rescore_nbest(list, features, &[grapheme, phoneme], weights)
}

/// Candidate weight vectors, one weight per rescorer.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGrid {
    pub points: Vec<Vec<f64>>,
}

impl WeightGrid {
    /// Every combination of `values` over `dims` rescorers.
    pub fn cartesian(values: &[f64], dims: usize) -> Self {
        let mut points = vec![Vec::new()];
        for _ in 0..dims {
            points = points
                .iter()
                .flat_map(|p| values.iter().map(move |&v| [p.as_slice(), &[v]].concat()))
                .collect();
        }
        Self { points }
    }

    /// 0.0 to 1.0 in steps of 0.05 for every rescorer.
    pub fn standard(dims: usize) -> Self {
        let values: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        Self::cartesian(&values, dims)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tuned {
    pub weights: CombinationWeights,
    pub point: Vec<f64>,
    /// Dev WER of the rescored 1-bests at `point`.
    pub dev_wer: f64,
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Less)
}

/// Grid point whose rescored 1-bests have the lowest dev WER. Ties go to
/// the lexicographically smallest weights.
pub fn tune_weights(
    dev: &[NBestList],
    features: &[&FeatureSequence],
    refs: &[Vec<String>],
    rescorers: &[&dyn Rescorer],
    grid: &WeightGrid,
) -> Result<Tuned> {
    if dev.is_empty() {
        return Err(CombineError::EmptyDev);
    }
    if features.len() != dev.len() || refs.len() != dev.len() {
        return Err(CombineError::LengthMismatch { lists: dev.len(), other: features.len().min(refs.len()) });
    }
    if grid.points.is_empty() {
        return Err(CombineError::EmptyGrid);
    }
    check_names(rescorers)?;
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if ref_len == 0 {
        return Err(EvalError::EmptyReferences.into());
    }
    let names: Vec<&str> = rescorers.iter().map(|r| r.name()).collect();
    let scores: Vec<Vec<Vec<f64>>> = dev.iter().zip(features).map(|(l, f)| score_components(l, f, rescorers)).collect();
    // edit errors are cached per (utterance, hypothesis)
    let mut errors: Vec<HashMap<usize, usize>> = vec![HashMap::new(); dev.len()];
    let mut best: Option<(usize, &Vec<f64>)> = None;
    for point in &grid.points {
        if point.len() != rescorers.len() {
            return Err(CombineError::GridDim { expected: rescorers.len(), got: point.len() });
        }
        let mut total = 0;
        for (u, (list, s)) in dev.iter().zip(&scores).enumerate() {
            let Some(i) = best_index(list, s, point) else {
                total += refs[u].len();
                continue;
            };
            total += *errors[u].entry(i).or_insert_with(|| edit_distance(&refs[u], &list.hyps[i].words));
        }
        let better = match best {
            None => true,
            Some((e, p)) => total < e || (total == e && lex_less(point, p)),
        };
        if better {
            best = Some((total, point));
        }
    }
    let (errs, point) = best.expect("grid is not empty");
    let weights = CombinationWeights::from_pairs(names.iter().copied().zip(point.iter().copied()))?;
    Ok(Tuned { weights, point: point.clone(), dev_wer: errs as f64 / ref_len as f64 })
}

/// Index of the hypothesis `apply_weights` would rank first.
fn best_index(list: &NBestList, scores: &[Vec<f64>], point: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (h, s)) in list.hyps.iter().zip(scores).enumerate() {
        let t = h.total + s.iter().zip(point).map(|(&x, &l)| weighted(l, x)).sum::<f64>();
        if best.is_none_or(|(_, b)| t.total_cmp(&b).is_gt()) {
            best = Some((i, t));
        }
    }
    best.map(|(i, _)| i)
}

/// Union of two systems' lists for one utterance. A hypothesis keeps its own
/// system's total as that system's score and is scored by the other system;
/// everything is then ranked by scoreA + λ·scoreB. Duplicate word sequences
/// keep the higher total (the A copy on ties).
pub fn union_cross_rescore(
    a: &NBestList,
    b: &NBestList,
    features: &FeatureSequence,
    scorer_a: &dyn Rescorer,
    scorer_b: &dyn Rescorer,
    lambda: f64,
) -> Result<NBestList> {
    if a.utt_id != b.utt_id {
        return Err(CombineError::UttMismatch { a: a.utt_id.clone(), b: b.utt_id.clone() });
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(CombineError::BadWeight { name: "union".into(), value: lambda });
    }
    check_names(&[scorer_a, scorer_b])?;
    let cross_b = score_components(a, features, &[scorer_b]);
    let cross_a = score_components(b, features, &[scorer_a]);
    let merged = a
        .hyps
        .iter()
        .zip(cross_b)
        .map(|(h, sb)| (h, h.total, sb[0]))
        .chain(b.hyps.iter().zip(cross_a).map(|(h, sa)| (h, sa[0], h.total)));
    let mut out: Vec<Hypothesis> = Vec::new();
    let mut index: HashMap<Vec<String>, usize> = HashMap::new();
    for (h, sa, sb) in merged {
        let hyp = Hypothesis {
            words: h.words.clone(),
            units: h.units.clone(),
            total: sa + weighted(lambda, sb),
            components: BTreeMap::from([(scorer_a.name().to_string(), sa), (scorer_b.name().to_string(), sb)]),
        };
        match index.get(&hyp.words) {
            Some(&i) if out[i].total >= hyp.total => {}
            Some(&i) => out[i] = hyp,
            None => {
                index.insert(hyp.words.clone(), out.len());
                out.push(hyp);
            }
        }
    }
    let mut list = NBestList { utt_id: a.utt_id.clone(), hyps: out };
    list.sort();
    Ok(list)
}
