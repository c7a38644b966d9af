//! Experiment configuration and the end-to-end pipeline behind the result
//! tables.

mod config;
mod run;

use std::path::Path;

use thiserror::Error;

use crate::combine::CombineError;
use crate::corpus::CorpusError;
use crate::decode::DecodeError;
use crate::eval::EvalError;
use crate::lmfst::{FstError, LmError};
use crate::neural::NeuralError;
use crate::units::UnitError;

pub use config::{
    AuxSection, CombineSection, DataConfig, DecodeSection, ExperimentConfig, FusionSection, LmSection, ModelConfig,
    TableKind, TrainSection, UnitsConfig, SHIPPED_SYNTH_SPEC,
};
pub use run::{load_data, run_experiment, Checks, ExperimentData, ExperimentOutcome, Summary};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Units(#[from] UnitError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Fst(#[from] FstError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Combine(#[from] CombineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io { path: path.display().to_string(), source }
    }
}
