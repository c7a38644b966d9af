//! N-best search: plain and shallow-fused label-synchronous beam search,
//! WFST-constrained search for phoneme models and an exhaustive oracle.

mod beam;
mod nbest;
mod network;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::NeuralError;
use crate::units::UnitId;

pub use beam::{beam_search, beam_search_fused, eos_allowed, exhaustive_search, EXHAUSTIVE_BUDGET};
pub use nbest::{parse_nbest, read_nbest, write_nbest, Hypothesis, NBestList};
pub use network::wfst_beam_search;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("{0} units cannot be decoded without a lexicon")]
    NotWordRecoverable(&'static str),
    #[error("inventory mismatch: {0}")]
    InventoryMismatch(String),
    #[error("empty feature sequence")]
    EmptyFeatures,
    #[error("exhaustive search over {0} sequences exceeds the budget")]
    Budget(u64),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("n-best line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    /// Beam width, also the number of hypotheses returned.
    pub beam: usize,
    /// Output length cap as a multiple of the encoder length.
    pub max_len_factor: usize,
    /// Absolute cap used instead of the factor when set.
    pub max_len: Option<usize>,
    /// Weight of the external LM (shallow fusion) or of the graph weights.
    pub lm_weight: f64,
    /// EOS is only expanded within this margin of the step's best
    /// candidate (shallow fusion only). `inf` disables the rule.
    pub eos_margin: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 8,
            max_len_factor: 3,
            max_len: None,
            lm_weight: 0.0,
            eos_margin: 1.0,
        }
    }
}

impl BeamConfig {
    pub fn max_len(&self, encoder_steps: usize) -> usize {
        self.max_len.unwrap_or(self.max_len_factor * encoder_steps)
    }
}

/// Score descending, then unit ids ascending.
pub(crate) fn rank(a_score: f64, a_units: &[UnitId], b_score: f64, b_units: &[UnitId]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_units.cmp(b_units))
}
