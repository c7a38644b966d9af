use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::autodiff::{Backend, Eval, ParamStore};
use super::las::{ck_err, fill_store, read_checkpoint, split_state, stack_states, write_checkpoint};
use super::layers::{pad_targets, Init, Linear, Lstm, RecurrentState};
use super::matrix::Matrix;
use super::train::{argmax_hits, fixed_batches, run_training, TrainConfig, TrainReport};
use super::NeuralError;
use crate::seed::rng_for;
use crate::units::{UnitCodec, UnitId, EOS, SOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmLmConfig {
    pub embedding_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub vocab_size: usize,
}

impl LstmLmConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            embedding_dim: 32,
            layers: 1,
            hidden: 64,
            vocab_size,
        }
    }
}

/// Recurrent state of one LM history.
#[derive(Clone, Debug)]
pub struct LmState(pub(crate) RecurrentState<Arc<Matrix>>);

/// Unit-level LSTM language model: embedding, LSTM stack, output layer.
#[derive(Clone, Debug)]
pub struct LstmLm {
    config: LstmLmConfig,
    codec: UnitCodec,
    store: ParamStore,
    embedding: super::ParamId,
    layers: Vec<Lstm>,
    output: Linear,
}

impl LstmLm {
    pub fn new(config: LstmLmConfig, codec: UnitCodec, seed: u64) -> Result<Self, NeuralError> {
        let mut rng = rng_for(seed, "lstm-lm-init");
        Self::build(config, codec, Init::Uniform(&mut rng))
    }

    fn build(config: LstmLmConfig, codec: UnitCodec, mut init: Init) -> Result<Self, NeuralError> {
        let c = &config;
        if c.embedding_dim == 0 || c.layers == 0 || c.hidden == 0 || c.vocab_size == 0 {
            return Err(NeuralError::Config("LM sizes must be at least 1".into()));
        }
        if c.vocab_size != codec.inventory().len() {
            return Err(NeuralError::Config(format!(
                "vocab_size {} does not match the inventory size {}",
                c.vocab_size,
                codec.inventory().len()
            )));
        }
        let mut store = ParamStore::new();
        let embedding = init.uniform("lm.emb", &mut store, c.vocab_size, c.embedding_dim);
        let layers = (0..c.layers)
            .map(|l| {
                let input = if l == 0 { c.embedding_dim } else { c.hidden };
                Lstm::new(&mut store, &mut init, &format!("lm.lstm{l}"), input, c.hidden)
            })
            .collect();
        let output = Linear::new(&mut store, &mut init, "lm.out", c.hidden, c.vocab_size, true);
        Ok(Self {
            config,
            codec,
            store,
            embedding,
            layers,
            output,
        })
    }

    pub fn config(&self) -> &LstmLmConfig {
        &self.config
    }

    pub fn codec(&self) -> &UnitCodec {
        &self.codec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn zero_state<B: Backend>(&self, be: &mut B, batch: usize) -> RecurrentState<B::V> {
        let z = be.constant(Matrix::zeros(batch, self.config.hidden));
        RecurrentState {
            h: vec![z.clone(); self.layers.len()],
            c: vec![z; self.layers.len()],
            ctx: be.constant(Matrix::zeros(batch, 0)),
        }
    }

    fn step_with<B: Backend>(
        &self,
        be: &mut B,
        store: &ParamStore,
        state: &RecurrentState<B::V>,
        prev: &[usize],
    ) -> (RecurrentState<B::V>, B::V) {
        let table = be.param(store, self.embedding);
        let mut x = be.gather_rows(&table, prev);
        let mut next = RecurrentState {
            h: Vec::with_capacity(self.layers.len()),
            c: Vec::with_capacity(self.layers.len()),
            ctx: state.ctx.clone(),
        };
        for (l, lstm) in self.layers.iter().enumerate() {
            let (h, c) = lstm.step(be, store, &x, &state.h[l], &state.c[l]);
            x = h.clone();
            next.h.push(h);
            next.c.push(c);
        }
        let logits = self.output.apply(be, store, &x);
        (next, logits)
    }

    /// Logits for padded teacher-forced inputs, time-major.
    fn forward<B: Backend>(&self, be: &mut B, store: &ParamStore, inputs: &[Vec<usize>]) -> B::V {
        let b = inputs.first().map_or(0, Vec::len);
        let mut state = self.zero_state(be, b);
        let mut all = Vec::with_capacity(inputs.len());
        for prev in inputs {
            let (s, logits) = self.step_with(be, store, &state, prev);
            all.push(logits);
            state = s;
        }
        be.concat_rows(&all)
    }

    pub fn initial_state(&self) -> LmState {
        LmState(self.zero_state(&mut Eval, 1))
    }

    /// One step for several histories; returns new states and B×V log-probabilities.
    pub fn step(&self, states: &[&LmState], prev: &[UnitId]) -> (Vec<LmState>, Matrix) {
        let mut be = Eval;
        let stacked = stack_states(&states.iter().map(|s| &s.0).collect::<Vec<_>>());
        let prev: Vec<usize> = prev.iter().map(|&u| u as usize).collect();
        let (next, logits) = self.step_with(&mut be, &self.store, &stacked, &prev);
        let logp = be.log_softmax(&logits);
        let out = split_state(&next, states.len()).into_iter().map(LmState).collect();
        (out, (*logp).clone())
    }

    fn check(&self, units: &[UnitId]) -> Result<(), NeuralError> {
        match units.iter().find(|&&u| u as usize >= self.config.vocab_size) {
            Some(&u) => Err(NeuralError::BadUnit(u)),
            None => Ok(()),
        }
    }

    /// log P(units, EOS), SOS prepended internally.
    pub fn lm_score(&self, units: &[UnitId]) -> Result<f64, NeuralError> {
        self.check(units)?;
        let target: Vec<usize> = units.iter().map(|&u| u as usize).chain([EOS as usize]).collect();
        let (inputs, flat, _) = pad_targets(&[target], SOS as usize);
        let logits = self.forward(&mut Eval, &self.store, &inputs);
        let logp = Eval.log_softmax(&logits);
        Ok(flat.iter().enumerate().map(|(i, &t)| logp.get(i, t)).sum())
    }

    fn targets(&self, text: &[Vec<UnitId>]) -> Result<Vec<Vec<usize>>, NeuralError> {
        text.iter()
            .map(|s| {
                self.check(s)?;
                Ok(s.iter().map(|&u| u as usize).chain([EOS as usize]).collect())
            })
            .collect()
    }

    /// Fraction of next-unit predictions (EOS included) that are correct.
    pub fn token_accuracy(&self, text: &[Vec<UnitId>]) -> Result<f64, NeuralError> {
        let targets = self.targets(text)?;
        let keys: Vec<usize> = targets.iter().map(Vec::len).collect();
        let (mut hit, mut n) = (0, 0);
        for batch in fixed_batches(&keys, 32) {
            let seqs: Vec<Vec<usize>> = batch.iter().map(|&i| targets[i].clone()).collect();
            let (inputs, flat, mask) = pad_targets(&seqs, SOS as usize);
            let logits = self.forward(&mut Eval, &self.store, &inputs);
            let (h, t) = argmax_hits(&logits, &flat, &mask);
            hit += h;
            n += t;
        }
        Ok(hit as f64 / n.max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        write_checkpoint(path, "lstm-lm", &self.config, &self.codec, &[&self.store])
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let ck = read_checkpoint(path, "lstm-lm")?;
        let config: LstmLmConfig = serde_json::from_value(ck.config).map_err(|e| ck_err(path, e))?;
        let codec: UnitCodec = serde_json::from_value(ck.codec).map_err(|e| ck_err(path, e))?;
        let mut lm = Self::build(config, codec, Init::Zero)?;
        fill_store(&mut lm.store, &ck.tensors, path)?;
        Ok(lm)
    }
}

/// Next-unit cross-entropy training on unit sequences (EOS appended).
pub fn train_lstm_lm(lm: &mut LstmLm, text: &[Vec<UnitId>], cfg: &TrainConfig) -> Result<TrainReport, NeuralError> {
    if text.is_empty() {
        return Err(NeuralError::EmptyCorpus);
    }
    let targets = lm.targets(text)?;
    let keys: Vec<usize> = targets.iter().map(Vec::len).collect();
    let frozen = lm.clone();
    let mut store = std::mem::take(&mut lm.store);
    let report = run_training(
        &mut store,
        &keys,
        cfg,
        "lstm-lm",
        |tape, store, batch| {
            let seqs: Vec<Vec<usize>> = batch.iter().map(|&i| targets[i].clone()).collect();
            let (inputs, flat, mask) = pad_targets(&seqs, SOS as usize);
            let logits = frozen.forward(tape, store, &inputs);
            let n = mask.iter().sum();
            (tape.cross_entropy(&logits, &flat, &mask), n)
        },
        |_| None,
    );
    lm.store = store;
    report
}
