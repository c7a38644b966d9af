//! Output-unit comparison lab for attention encoder-decoder speech recognition.
//!
//! The crate covers the full pipeline at desk scale: synthetic corpora,
//! grapheme / word-piece / phoneme inventories, n-gram LMs and lexicon ∘
//! grammar transducers, a small reverse-mode autodiff with LAS models,
//! beam search (plain, LM-fused, transducer-constrained), N-best
//! combination and scoring.

pub mod combine;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod experiment;
pub mod lmfst;
pub mod neural;
pub mod seed;
pub mod units;
