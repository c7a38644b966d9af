//! Utterances, corpora and their text file format.
//!
//! Corpus file layout (UTF-8, LF):
//!
//! ```text
//! DIM 16
//! UTT train-00000
//! REF THE CAT SAT
//! FRAMES 3
//! 0.1 0.2 ...   (D values)
//! ...
//! ```

mod lexicon;
mod synth;

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lexicon::{load_lexicon, parse_lexicon, Lexicon};
pub use synth::{synth_corpus, Grammar, SynthSpec, Template};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),
    #[error("invalid feature sequence: {0}")]
    Features(String),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// A T×D matrix of frame features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f64>,
    num_frames: usize,
    dim: usize,
}

impl FeatureSequence {
    pub fn new(num_frames: usize, dim: usize, data: Vec<f64>) -> Result<Self, CorpusError> {
        if num_frames == 0 || dim == 0 {
            return Err(CorpusError::Features(format!(
                "shape {num_frames}x{dim} has a zero extent"
            )));
        }
        if data.len() != num_frames * dim {
            return Err(CorpusError::Features(format!(
                "expected {} values for {num_frames}x{dim}, got {}",
                num_frames * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::Features(format!(
                "non-finite value at frame {}",
                pos / dim
            )));
        }
        Ok(Self {
            data,
            num_frames,
            dim,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureSequence,
    pub transcript: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub split: Split,
    utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(split: Split, utterances: Vec<Utterance>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for u in &utterances {
            if u.id.is_empty() {
                return Err(CorpusError::Parse {
                    line: 0,
                    msg: "empty utterance id".into(),
                });
            }
            if !seen.insert(u.id.as_str()) {
                return Err(CorpusError::DuplicateId(u.id.clone()));
            }
        }
        Ok(Self { split, utterances })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn transcripts(&self) -> impl Iterator<Item = &[String]> {
        self.utterances.iter().map(|u| u.transcript.as_slice())
    }

    /// Set of distinct transcript words.
    pub fn vocabulary(&self) -> BTreeSet<String> {
        self.transcripts().flatten().cloned().collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let dim = self.utterances.first().map_or(0, |u| u.features.dim());
        if self.utterances.is_empty() {
            return out;
        }
        writeln!(out, "DIM {dim}").unwrap();
        for u in &self.utterances {
            writeln!(out, "UTT {}", u.id).unwrap();
            if u.transcript.is_empty() {
                out.push_str("REF\n");
            } else {
                writeln!(out, "REF {}", u.transcript.join(" ")).unwrap();
            }
            writeln!(out, "FRAMES {}", u.features.num_frames()).unwrap();
            for t in 0..u.features.num_frames() {
                let frame = u.features.frame(t);
                for (i, v) in frame.iter().enumerate() {
                    if i > 0 {
                        out.push(' ');
                    }
                    write!(out, "{v}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_text()).map_err(|e| CorpusError::io(path, e))
    }

    pub fn load(path: &Path, split: Split) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::parse(&text, split)
    }

    pub fn parse(text: &str, split: Split) -> Result<Self, CorpusError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, msg: &str| CorpusError::Parse {
            line,
            msg: msg.to_string(),
        };

        let (line_no, header) = loop {
            match lines.next() {
                None => {
                    log::warn!("empty corpus file; usable only for unlabeled decoding");
                    return Ok(Corpus {
                        split,
                        utterances: Vec::new(),
                    });
                }
                Some((_, l)) if l.trim().is_empty() => continue,
                Some(x) => break x,
            }
        };
        let dim: usize = header
            .strip_prefix("DIM ")
            .and_then(|d| d.trim().parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| err(line_no, "expected `DIM <D>` header"))?;

        let mut utterances = Vec::new();
        let mut seen = HashSet::new();
        while let Some((line_no, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let id = line
                .strip_prefix("UTT ")
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| err(line_no, "expected `UTT <id>`"))?
                .to_string();
            if !seen.insert(id.clone()) {
                return Err(CorpusError::DuplicateId(id));
            }
            let (ref_no, ref_line) = lines
                .next()
                .ok_or_else(|| err(line_no + 1, "missing REF line"))?;
            let words = if ref_line == "REF" {
                ""
            } else {
                ref_line
                    .strip_prefix("REF ")
                    .ok_or_else(|| err(ref_no, "expected `REF <words>`"))?
            };
            let transcript = normalize_words(words);
            let (fr_no, fr_line) = lines
                .next()
                .ok_or_else(|| err(ref_no + 1, "missing FRAMES line"))?;
            let num_frames: usize = fr_line
                .strip_prefix("FRAMES ")
                .and_then(|t| t.trim().parse().ok())
                .ok_or_else(|| err(fr_no, "expected `FRAMES <T>`"))?;
            let mut data = Vec::with_capacity(num_frames * dim);
            for k in 0..num_frames {
                let (no, row) = lines
                    .next()
                    .ok_or_else(|| err(fr_no + k + 1, "unexpected end of frames"))?;
                let before = data.len();
                for tok in row.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| err(no, &format!("bad number `{tok}`")))?;
                    data.push(v);
                }
                if data.len() - before != dim {
                    return Err(err(
                        no,
                        &format!(
                            "frame has {} values but header declares DIM {dim}",
                            data.len() - before
                        ),
                    ));
                }
            }
            let features = FeatureSequence::new(num_frames, dim, data)
                .map_err(|e| err(fr_no, &e.to_string()))?;
            utterances.push(Utterance {
                id,
                features,
                transcript,
            });
        }
        Ok(Corpus { split, utterances })
    }
}

/// Uppercase, whitespace-split word tokens.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_uppercase()).collect()
}
