//! Differentiable sequence models: LAS encoder-decoder, LSTM LM and the
//! auxiliary-decoder extension.

pub mod autodiff;
mod aux;
mod gradcheck;
mod las;
mod layers;
mod lstm_lm;
pub mod matrix;
mod train;

use thiserror::Error;

pub use aux::{aux_train, AuxConfig, AuxDecoderModel};
pub use autodiff::{AttentionSpec, Backend, Eval, Gradients, ParamId, ParamStore, Tape, Var};
pub use gradcheck::{finite_difference_check, grad_check};
pub use las::{DecoderState, Encoded, LasConfig, LasModel};
pub use lstm_lm::{train_lstm_lm, LmState, LstmLm, LstmLmConfig};
pub use matrix::Matrix;
pub use train::{train_las, TrainConfig, TrainReport};

use crate::units::UnitId;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("feature dimension {got} does not match the model input dimension {expected}")]
    Dim { expected: usize, got: usize },
    #[error("unit id {0} is outside the model inventory")]
    BadUnit(UnitId),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("{0} units are not word-recoverable; the base model needs grapheme or word-piece units")]
    NotWordRecoverable(&'static str),
    #[error("inventory mismatch: {0}")]
    InventoryMismatch(String),
    #[error("{path}: bad checkpoint: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
