use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::lmfst::NGramConfig;
use crate::neural::{AuxConfig, LasConfig, LstmLmConfig, TrainConfig};

/// The shipped synthetic corpus definition.
pub const SHIPPED_SYNTH_SPEC: &str = include_str!("../../../../configs/synth.toml");

const SYNTHETIC: &str = include_str!("../../../../configs/synthetic.toml");
const REFERENCE_SMALL: &str = include_str!("../../../../configs/reference-small.toml");
const REFERENCE_MEDIUM: &str = include_str!("../../../../configs/reference-medium.toml");
const REFERENCE_LARGE: &str = include_str!("../../../../configs/reference-large.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    /// 1-best WER per unit, with and without LM fusion.
    Units,
    /// Word-piece N-best rescored by phoneme / grapheme models.
    Table5,
    /// Union of N-best lists with cross-rescoring.
    Table6,
    /// Rescoring with an auxiliary phoneme decoder.
    Table7,
}

/// Full description of one experiment run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Global seed; every component derives its own seed from it.
    pub seed: u64,
    pub tables: Vec<TableKind>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub units: UnitsConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub combine: CombineSection,
    #[serde(default)]
    pub aux: AuxSection,
}

/// Either a synthetic corpus (the default) or corpus files on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synth spec path; the shipped spec when absent.
    pub synth_spec: Option<String>,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Directory with `train.txt`, `dev.txt` and `test.txt` corpus files.
    /// Overrides the synthetic source.
    pub corpus_dir: Option<String>,
    /// Lexicon used with `corpus_dir`.
    pub lexicon: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { synth_spec: None, train: 2000, dev: 200, test: 200, corpus_dir: None, lexicon: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnitsConfig {
    pub wordpiece_vocab: usize,
}

impl Default for UnitsConfig {
    fn default() -> Self {
        Self { wordpiece_vocab: 80 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `desk`, or one of the reference sizes `small`, `medium`, `large`.
    pub preset: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { preset: "desk".into() }
    }
}

impl ModelConfig {
    pub fn las(&self, input_dim: usize, vocab_size: usize) -> Result<LasConfig, ExperimentError> {
        match self.preset.as_str() {
            "desk" => Ok(LasConfig::desk(input_dim, vocab_size)),
            other => LasConfig::reference(other, input_dim, vocab_size)
                .ok_or_else(|| ExperimentError::Config(format!("model.preset: unknown preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, batch_size: t.batch_size, learning_rate: t.learning_rate, clip_norm: t.clip_norm }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            seed,
        }
    }
}

/// Word n-gram LM of the phonemic system's search network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub ngram: NGramConfig,
    /// λ on the network cost during phonemic decoding.
    pub weight: f64,
}

impl Default for LmSection {
    fn default() -> Self {
        Self { ngram: NGramConfig::default(), weight: 0.5 }
    }
}

/// Shallow fusion of the grapheme and word-piece systems with LSTM LMs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub enabled: bool,
    pub weight: f64,
    pub eos_margin: f64,
    pub epochs: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        let lm = LstmLmConfig::desk(0);
        Self {
            enabled: true,
            weight: 0.35,
            eos_margin: 1.0,
            epochs: 10,
            embedding_dim: lm.embedding_dim,
            hidden: lm.hidden,
            layers: lm.layers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    /// Beam size, which is also the N-best size.
    pub beam: usize,
    /// Larger list size used for the union comparison.
    pub beam_large: usize,
    /// List size of the phonemic system in the rescoring table.
    pub phoneme_beam: usize,
    pub max_len_factor: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { beam: 8, beam_large: 16, phoneme_beam: 8, max_len_factor: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CombineSection {
    pub grid_max: f64,
    pub grid_step: f64,
}

impl Default for CombineSection {
    fn default() -> Self {
        Self { grid_max: 1.0, grid_step: 0.05 }
    }
}

impl CombineSection {
    pub fn values(&self) -> Result<Vec<f64>, ExperimentError> {
        if !(self.grid_step > 0.0 && self.grid_max >= 0.0 && self.grid_max.is_finite()) {
            return Err(ExperimentError::Config("combine: grid_step must be > 0 and grid_max >= 0".into()));
        }
        let n = (self.grid_max / self.grid_step + 1e-9).floor() as usize;
        // i / k rather than i · step keeps values like 0.35 exact
        let k = (1.0 / self.grid_step).round();
        let exact = (k * self.grid_step - 1.0).abs() < 1e-12;
        Ok((0..=n).map(|i| if exact { i as f64 / k } else { i as f64 * self.grid_step }).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxSection {
    pub embedding_dim: usize,
    pub attention_dim: usize,
    pub epochs: usize,
}

impl Default for AuxSection {
    fn default() -> Self {
        let a = AuxConfig::default();
        Self { embedding_dim: a.embedding_dim, attention_dim: a.attention_dim, epochs: 10 }
    }
}

impl AuxSection {
    pub fn config(&self) -> AuxConfig {
        AuxConfig { embedding_dim: self.embedding_dim, attention_dim: self.attention_dim }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The configuration with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Named presets. `synthetic` runs every table on the shipped corpus;
    /// `table5-synthetic`, `table6-synthetic`, `table7-synthetic` and
    /// `units-synthetic` run one table each. `reference-*` document the
    /// full-scale setups and need corpus files.
    pub fn preset(name: &str) -> Option<Self> {
        let text = match name {
            "reference-small" => REFERENCE_SMALL,
            "reference-medium" => REFERENCE_MEDIUM,
            "reference-large" => REFERENCE_LARGE,
            _ => SYNTHETIC,
        };
        let mut cfg = Self::from_toml(text).expect("shipped presets parse");
        let table = match name {
            "synthetic" | "reference-small" | "reference-medium" | "reference-large" => return Some(cfg),
            "units-synthetic" => TableKind::Units,
            "table5-synthetic" => TableKind::Table5,
            "table6-synthetic" => TableKind::Table6,
            "table7-synthetic" => TableKind::Table7,
            _ => return None,
        };
        cfg.name = name.to_string();
        cfg.tables = vec![table];
        Some(cfg)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &[
            "synthetic",
            "units-synthetic",
            "table5-synthetic",
            "table6-synthetic",
            "table7-synthetic",
            "reference-small",
            "reference-medium",
            "reference-large",
        ]
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.tables.is_empty() {
            return bad("tables: at least one table is required");
        }
        if self.data.corpus_dir.is_none() && (self.data.train == 0 || self.data.dev == 0 || self.data.test == 0) {
            return bad("data: train, dev and test counts must be at least 1");
        }
        if self.data.corpus_dir.is_some() && self.data.lexicon.is_none() {
            return bad("data.lexicon: required with data.corpus_dir");
        }
        if [self.decode.beam, self.decode.beam_large, self.decode.phoneme_beam, self.decode.max_len_factor].contains(&0) {
            return bad("decode: beam sizes and max_len_factor must be at least 1");
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return bad("train: epochs and batch_size must be at least 1");
        }
        for (k, v) in [("lm.weight", self.lm.weight), ("fusion.weight", self.fusion.weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{k}: must be finite and non-negative"));
            }
        }
        if self.fusion.eos_margin.is_nan() || self.fusion.eos_margin < 0.0 {
            return bad("fusion.eos_margin: must be non-negative");
        }
        self.combine.values()?;
        self.model.las(1, 1)?;
        Ok(())
    }
}
