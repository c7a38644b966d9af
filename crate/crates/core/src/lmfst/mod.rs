//! Word n-gram LM and the lexicon / grammar transducers searched by the
//! phonemic decoder.

mod build;
mod ngram;
mod wfst;

use thiserror::Error;

pub use build::{build_grammar_fst, build_lexicon_fst, lexicon_input_symbols};
pub use ngram::{train_ngram, LmError, NGramConfig, NGramLm, WordId, BOS_TOKEN, EOS_TOKEN};
pub use wfst::{
    best_path_weight, best_path_weight_with_output, compose, Arc, Label, StateId, SymbolTable, Wfst, EPSILON,
    EPSILON_SYMBOL,
};

#[derive(Debug, Error)]
pub enum FstError {
    #[error("state {0} does not exist")]
    BadState(usize),
    #[error("label outside the symbol table")]
    BadLabel,
    #[error("weight {0} is not finite")]
    BadWeight(f64),
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error("symbol `{0}` is missing from the right-hand input alphabet")]
    AlphabetMismatch(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Natural-log LM probability of a word sequence.
pub fn lm_logprob(lm: &NGramLm, words: &[String]) -> f64 {
    lm.logprob(words)
}
