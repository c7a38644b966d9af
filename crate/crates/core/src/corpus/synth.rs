//! Synthetic corpora: template-grammar sentences rendered as per-phoneme
//! Gaussian frames.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, FeatureSequence, Lexicon, Split, Utterance};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub weight: f64,
    pub slots: Vec<String>,
}

/// Weighted templates over named word slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grammar {
    pub templates: Vec<Template>,
    pub slots: BTreeMap<String, BTreeMap<String, f64>>,
}

impl Grammar {
    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if self.templates.is_empty() {
            return bad("grammar has no templates".into());
        }
        let total: f64 = self.templates.iter().map(|t| t.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.templates.iter().any(|t| t.weight < 0.0) {
            return bad(format!("template weights sum to {total}, expected 1"));
        }
        for t in &self.templates {
            if t.slots.is_empty() {
                return bad("template with no slots".into());
            }
            for s in &t.slots {
                if !self.slots.contains_key(s) {
                    return bad(format!("template references unknown slot `{s}`"));
                }
            }
        }
        for (name, words) in &self.slots {
            let total: f64 = words.values().sum();
            if words.is_empty() || (total - 1.0).abs() > 1e-9 || words.values().any(|&p| p < 0.0) {
                return bad(format!("slot `{name}` probabilities sum to {total}, expected 1"));
            }
        }
        Ok(())
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.slots.values().flat_map(|w| w.keys().map(String::as_str))
    }

    fn pick<'a, R: Rng>(rng: &mut R, items: impl Iterator<Item = (&'a str, f64)>) -> &'a str {
        let r: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = "";
        for (item, p) in items {
            acc += p;
            last = item;
            if r < acc {
                return item;
            }
        }
        last
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<String> {
        let r: f64 = rng.random();
        let mut acc = 0.0;
        let mut template = self.templates.last().expect("validated");
        for t in &self.templates {
            acc += t.weight;
            if r < acc {
                template = t;
                break;
            }
        }
        template
            .slots
            .iter()
            .map(|s| {
                let words = &self.slots[s];
                Self::pick(rng, words.iter().map(|(w, p)| (w.as_str(), *p))).to_string()
            })
            .collect()
    }
}

/// On-disk form of [`SynthSpec`]; pronunciations are space-joined strings.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    seed: u64,
    #[serde(default = "default_dim")]
    feature_dim: usize,
    #[serde(default = "default_min_frames")]
    min_frames: usize,
    #[serde(default = "default_max_frames")]
    max_frames: usize,
    #[serde(default = "default_noise")]
    noise_std: f64,
    phonemes: Vec<String>,
    #[serde(default)]
    means: Vec<Vec<f64>>,
    #[serde(default)]
    homophone_groups: Vec<Vec<String>>,
    lexicon: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    unlisted: BTreeMap<String, Vec<String>>,
    grammar: Grammar,
}

fn default_dim() -> usize {
    16
}
fn default_min_frames() -> usize {
    2
}
fn default_max_frames() -> usize {
    4
}
fn default_noise() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub feature_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise_std: f64,
    pub phonemes: Vec<String>,
    /// One mean vector per phoneme, `feature_dim` long.
    pub means: Vec<Vec<f64>>,
    pub lexicon: Lexicon,
    /// Words spoken in the audio but left out of `lexicon`, so a system
    /// that only knows `lexicon` cannot spell them.
    pub unlisted: Lexicon,
    pub homophone_groups: Vec<Vec<String>>,
    pub grammar: Grammar,
}

impl SynthSpec {
    /// Draws standard-normal phoneme means from the spec seed.
    pub fn draw_means(seed: u64, num_phonemes: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, "phoneme-means");
        (0..num_phonemes)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self, CorpusError> {
        let file: SynthFile =
            toml::from_str(text).map_err(|e| CorpusError::InvalidSpec(e.to_string()))?;
        let lexicon = Self::parse_lexicon(&file.lexicon)?;
        let unlisted = Self::parse_lexicon(&file.unlisted)?;
        let means = if file.means.is_empty() {
            Self::draw_means(file.seed, file.phonemes.len(), file.feature_dim)
        } else {
            file.means
        };
        let spec = SynthSpec {
            seed: file.seed,
            feature_dim: file.feature_dim,
            min_frames: file.min_frames,
            max_frames: file.max_frames,
            noise_std: file.noise_std,
            phonemes: file.phonemes,
            means,
            lexicon,
            unlisted,
            homophone_groups: file.homophone_groups,
            grammar: file.grammar,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn parse_lexicon(entries: &BTreeMap<String, Vec<String>>) -> Result<Lexicon, CorpusError> {
        let mut lexicon = Lexicon::new();
        for (word, prons) in entries {
            if prons.is_empty() {
                return Err(CorpusError::InvalidSpec(format!("`{word}` has no pronunciation")));
            }
            for p in prons {
                lexicon.add(word, p.split_whitespace().map(str::to_string).collect())?;
            }
        }
        Ok(lexicon)
    }

    fn lexicon_entries(lexicon: &Lexicon) -> BTreeMap<String, Vec<String>> {
        lexicon
            .entries()
            .map(|(w, p)| (w.to_string(), p.iter().map(|x| x.join(" ")).collect()))
            .collect()
    }

    /// Pronunciations used for rendering, listed or not.
    pub fn spoken(&self, word: &str) -> Option<&[Vec<String>]> {
        self.lexicon.pronunciations(word).or_else(|| self.unlisted.pronunciations(word))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        let file = SynthFile {
            seed: self.seed,
            feature_dim: self.feature_dim,
            min_frames: self.min_frames,
            max_frames: self.max_frames,
            noise_std: self.noise_std,
            phonemes: self.phonemes.clone(),
            means: self.means.clone(),
            homophone_groups: self.homophone_groups.clone(),
            lexicon: Self::lexicon_entries(&self.lexicon),
            unlisted: Self::lexicon_entries(&self.unlisted),
            grammar: self.grammar.clone(),
        };
        toml::to_string(&file).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range [{}, {}] is invalid",
                self.min_frames, self.max_frames
            ));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        if self.means.len() != self.phonemes.len()
            || self.means.iter().any(|m| m.len() != self.feature_dim)
        {
            return bad("one mean of length feature_dim is required per phoneme".into());
        }
        let inventory: std::collections::HashSet<&str> =
            self.phonemes.iter().map(String::as_str).collect();
        for p in self.lexicon.phonemes().iter().chain(self.unlisted.phonemes().iter()) {
            if !inventory.contains(p.as_str()) {
                return bad(format!("lexicon phoneme `{p}` is not in the inventory"));
            }
        }
        if let Some((w, _)) = self.unlisted.entries().find(|(w, _)| self.lexicon.contains(w)) {
            return bad(format!("`{w}` is both listed and unlisted"));
        }
        self.grammar.validate()?;
        for w in self.grammar.words() {
            if self.spoken(w).is_none() {
                return bad(format!("grammar word `{w}` has no pronunciation"));
            }
        }
        for group in &self.homophone_groups {
            let mut prons = group.iter().map(|w| {
                let mut p = self.lexicon.pronunciations(w).unwrap_or(&[]).to_vec();
                p.sort();
                p
            });
            let first = prons.next().unwrap_or_default();
            if first.is_empty() || prons.any(|p| p != first) {
                return bad(format!("homophone group {group:?} does not share pronunciations"));
            }
        }
        Ok(())
    }

    fn phoneme_index(&self) -> BTreeMap<&str, usize> {
        self.phonemes
            .iter()
            .enumerate()
            .map(|(i, p)| (p.as_str(), i))
            .collect()
    }
}

/// Generates `count` utterances. Pure in `(spec, count, split)`.
pub fn synth_corpus(spec: &SynthSpec, count: usize, split: Split) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    if count == 0 {
        return Err(CorpusError::InvalidSpec("count must be at least 1".into()));
    }
    let index = spec.phoneme_index();
    let mut rng = rng_for(spec.seed, &format!("synth-{}", split.name()));
    let dim = spec.feature_dim;
    let mut utterances = Vec::with_capacity(count);
    for n in 0..count {
        let words = spec.grammar.sample(&mut rng);
        let mut data = Vec::new();
        for w in &words {
            let prons = spec.spoken(w).expect("validated");
            let pron = &prons[rng.random_range(0..prons.len())];
            for ph in pron {
                let mean = &spec.means[index[ph.as_str()]];
                let dur = rng.random_range(spec.min_frames..=spec.max_frames);
                for _ in 0..dur {
                    for m in mean.iter() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        data.push(m + spec.noise_std * z);
                    }
                }
            }
        }
        let frames = data.len() / dim;
        utterances.push(Utterance {
            id: format!("{}-{n:05}", split.name()),
            features: FeatureSequence::new(frames, dim, data)?,
            transcript: words,
        });
    }
    Corpus::new(split, utterances)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(words: &[(&str, &str)], slot: &[(&str, f64)], noise: f64, dur: usize) -> SynthSpec {
        let mut lex = String::new();
        for (w, p) in words {
            lex.push_str(&format!("{w} = [\"{p}\"]\n"));
        }
        let mut slot_toml = String::new();
        for (w, p) in slot {
            slot_toml.push_str(&format!("{w} = {p}\n"));
        }
        let text = format!(
            "seed = 3\nfeature_dim = 4\nmin_frames = {dur}\nmax_frames = {dur}\nnoise_std = {noise}\n\
             phonemes = [\"K\", \"AE\", \"T\", \"R\", \"EH\", \"D\"]\n\
             [lexicon]\n{lex}\n[grammar]\ntemplates = [{{ weight = 1.0, slots = [\"w\"] }}]\n\
             [grammar.slots.w]\n{slot_toml}"
        );
        SynthSpec::from_toml(&text).unwrap()
    }

    #[test]
    fn zero_noise_fixed_duration_repeats_means() {
        let s = spec(&[("CAT", "K AE T")], &[("CAT", 1.0)], 0.0, 2);
        let c = synth_corpus(&s, 3, Split::Train).unwrap();
        for u in c.utterances() {
            assert_eq!(u.features.num_frames(), 6);
            for (t, ph) in [0, 0, 1, 1, 2, 2].iter().enumerate() {
                assert_eq!(u.features.frame(t), s.means[*ph].as_slice());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(&[("CAT", "K AE T"), ("RED", "R EH D")], &[("CAT", 0.5), ("RED", 0.5)], 0.3, 3);
        let a = synth_corpus(&s, 20, Split::Dev).unwrap();
        let b = synth_corpus(&s, 20, Split::Dev).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(&s, 20, Split::Test).unwrap();
        assert_ne!(a.utterances()[0].features, c.utterances()[0].features);
    }

    #[test]
    fn homophones_render_identically() {
        let s = spec(&[("RED", "R EH D"), ("READ", "R EH D")], &[("RED", 0.5), ("READ", 0.5)], 0.0, 3);
        let c = synth_corpus(&s, 40, Split::Train).unwrap();
        let red = c.utterances().iter().find(|u| u.transcript == ["RED"]).unwrap();
        let read = c.utterances().iter().find(|u| u.transcript == ["READ"]).unwrap();
        // brute-force frame comparison
        assert_eq!(red.features.num_frames(), read.features.num_frames());
        for t in 0..red.features.num_frames() {
            for (a, b) in red.features.frame(t).iter().zip(read.features.frame(t)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = spec(&[("CAT", "K AE T")], &[("CAT", 1.0)], 0.0, 2);
        s.feature_dim = 0;
        assert!(synth_corpus(&s, 1, Split::Train).is_err());
        let mut s = spec(&[("CAT", "K AE T")], &[("CAT", 1.0)], 0.0, 2);
        s.grammar.templates.clear();
        assert!(synth_corpus(&s, 1, Split::Train).is_err());
        let s = spec(&[("CAT", "K AE T")], &[("CAT", 1.0)], 0.0, 2);
        assert!(synth_corpus(&s, 0, Split::Train).is_err());
    }

    #[test]
    fn unlisted_words_are_spoken_but_not_listed() {
        let text = "seed = 1\nfeature_dim = 2\nphonemes = [\"K\", \"AE\", \"T\"]\n\
                    [lexicon]\nCAT = [\"K AE T\"]\n[unlisted]\nTACK = [\"T AE K\"]\n\
                    [grammar]\ntemplates = [{ weight = 1.0, slots = [\"w\"] }]\n\
                    [grammar.slots.w]\nCAT = 0.5\nTACK = 0.5\n";
        let s = SynthSpec::from_toml(text).unwrap();
        assert!(!s.lexicon.contains("TACK"));
        let c = synth_corpus(&s, 30, Split::Train).unwrap();
        assert!(c.utterances().iter().any(|u| u.transcript == ["TACK"]));
        assert_eq!(SynthSpec::from_toml(&s.to_toml()).unwrap(), s);
        let clash = text.replace("TACK = [", "CAT = [");
        assert!(SynthSpec::from_toml(&clash).is_err());
    }

    #[test]
    fn toml_round_trip_keeps_means() {
        let s = spec(&[("CAT", "K AE T")], &[("CAT", 1.0)], 0.1, 2);
        let again = SynthSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(s, again);
    }
}
