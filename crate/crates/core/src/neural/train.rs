use std::collections::BTreeMap;
use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::autodiff::{Backend, Eval, ParamId, ParamStore, Tape, Var};
use super::las::LasModel;
use super::layers::{pad_targets, Memory};
use super::matrix::Matrix;
use super::NeuralError;
use crate::corpus::Corpus;
use crate::seed::rng_for;
use crate::units::{EOS, SOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Token-averaged training loss per epoch, measured during the epoch.
    pub train_loss: Vec<f64>,
    /// Token-averaged dev loss after each epoch (empty without a dev set).
    pub dev_loss: Vec<f64>,
}

/// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
pub(crate) struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).data().len()]).collect();
        Self { lr, t: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (id, g) in grads {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(*id).data_mut();
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = B1 * *mi + (1.0 - B1) * gi;
                *vi = B2 * *vi + (1.0 - B2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub(crate) fn clip(grads: &mut [(ParamId, Matrix)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// Items grouped by `key`, shuffled within each group, cut into batches of at
/// most `batch_size`, then the batch order shuffled.
pub(crate) fn bucket_batches(keys: &[usize], batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut items) in groups {
        items.shuffle(rng);
        for chunk in items.chunks(batch_size.max(1)) {
            batches.push(chunk.to_vec());
        }
    }
    batches.shuffle(rng);
    batches
}

/// Deterministic batches for evaluation passes.
pub(crate) fn fixed_batches(keys: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    groups
        .into_values()
        .flat_map(|items| items.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Generic epoch loop. `loss` builds the summed batch NLL on the tape.
pub(crate) fn run_training(
    store: &mut ParamStore,
    keys: &[usize],
    cfg: &TrainConfig,
    label: &str,
    mut loss: impl FnMut(&mut Tape, &ParamStore, &[usize]) -> (Var, f64),
    mut after_epoch: impl FnMut(&ParamStore) -> Option<f64>,
) -> Result<TrainReport, NeuralError> {
    let mut adam = Adam::new(store, cfg.learning_rate);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &format!("{label}-batches-{epoch}"));
        let batches = bucket_batches(keys, cfg.batch_size, &mut rng);
        let (mut total, mut tokens) = (0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let (sum, n) = loss(&mut tape, store, batch);
            let value = tape.value(&sum).get(0, 0);
            if !value.is_finite() {
                return Err(NeuralError::NonFinite { epoch, batch: bi });
            }
            let mean = tape.scale(&sum, 1.0 / n);
            let mut grads = tape.backward(mean).0;
            drop(tape);
            if grads.iter().any(|(_, g)| !g.is_finite()) {
                return Err(NeuralError::NonFinite { epoch, batch: bi });
            }
            clip(&mut grads, cfg.clip_norm);
            adam.update(store, &grads);
            total += value;
            tokens += n;
        }
        let train = total / tokens.max(1.0);
        report.train_loss.push(train);
        let dev = after_epoch(store);
        if let Some(d) = dev {
            report.dev_loss.push(d);
        }
        info!("{label} epoch {epoch}: train {train:.4} dev {}", dev.map_or("-".into(), |d| format!("{d:.4}")));
    }
    Ok(report)
}

impl LasModel {
    /// Target unit ids (EOS appended) for every utterance.
    pub(crate) fn targets(&self, corpus: &Corpus) -> Result<Vec<Vec<usize>>, NeuralError> {
        corpus
            .utterances()
            .iter()
            .map(|u| {
                let units = self.codec.encode(&u.transcript);
                self.check_units(&units)?;
                Ok(units.into_iter().map(|x| x as usize).chain([EOS as usize]).collect())
            })
            .collect()
    }

    /// Summed teacher-forced NLL and logits for a batch of same-length
    /// utterances.
    pub(crate) fn batch_forward<B: Backend>(
        &self,
        be: &mut B,
        store: &ParamStore,
        corpus: &Corpus,
        targets: &[Vec<usize>],
        batch: &[usize],
    ) -> (B::V, B::V, Vec<usize>, Vec<f64>) {
        let utts = corpus.utterances();
        let feats: Vec<_> = batch.iter().map(|&i| &utts[i].features).collect();
        let x = be.constant(self.batch_input(&feats));
        let steps = self.encoder_steps(feats[0].num_frames());
        let g = batch.len();
        let values = self.encoder.forward(be, store, &x, steps, g);
        let memory = Memory::new(be, store, &self.decoder.attention, values, steps);
        let seqs: Vec<Vec<usize>> = batch.iter().map(|&i| targets[i].clone()).collect();
        let (inputs, flat, mask) = pad_targets(&seqs, SOS as usize);
        let groups: Arc<[usize]> = Arc::from((0..g).collect::<Vec<_>>());
        let init = self.decoder.zero_state(be, g);
        let (feats, _) = self.decoder.teacher_force(be, store, &memory, &groups, init, &inputs);
        let logits = self.decoder.output.apply(be, store, &feats);
        let nll = be.cross_entropy(&logits, &flat, &mask);
        (nll, logits, flat, mask)
    }

    fn length_keys(&self, corpus: &Corpus) -> Vec<usize> {
        corpus
            .utterances()
            .iter()
            .map(|u| self.encoder_steps(u.features.num_frames()))
            .collect()
    }

    /// Token-averaged teacher-forced loss over a corpus.
    pub fn corpus_loss(&self, corpus: &Corpus) -> Result<f64, NeuralError> {
        let targets = self.targets(corpus)?;
        for u in corpus.utterances() {
            self.check_features(&u.features)?;
        }
        let (mut total, mut tokens) = (0.0, 0.0);
        for batch in fixed_batches(&self.length_keys(corpus), 32) {
            let (nll, _, _, mask) = self.batch_forward(&mut Eval, &self.store, corpus, &targets, &batch);
            total += nll.get(0, 0);
            tokens += mask.iter().sum::<f64>();
        }
        Ok(total / tokens.max(1.0))
    }

    /// Fraction of teacher-forced steps (EOS included) whose argmax is the target.
    pub fn token_accuracy(&self, corpus: &Corpus) -> Result<f64, NeuralError> {
        let targets = self.targets(corpus)?;
        let (mut hit, mut n) = (0usize, 0usize);
        for batch in fixed_batches(&self.length_keys(corpus), 32) {
            let (_, logits, flat, mask) = self.batch_forward(&mut Eval, &self.store, corpus, &targets, &batch);
            let (h, t) = argmax_hits(&logits, &flat, &mask);
            hit += h;
            n += t;
        }
        Ok(hit as f64 / n.max(1) as f64)
    }
}

pub(crate) fn argmax_hits(logits: &Matrix, targets: &[usize], mask: &[f64]) -> (usize, usize) {
    let (mut hit, mut n) = (0, 0);
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m == 0.0 {
            continue;
        }
        let row = logits.row(r);
        let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        hit += usize::from(best == t);
        n += 1;
    }
    (hit, n)
}

/// Teacher-forced cross-entropy training with Adam and gradient clipping.
/// Batches hold utterances of equal encoder length. Deterministic given
/// `cfg.seed`.
pub fn train_las(
    model: &mut LasModel,
    train: &Corpus,
    dev: Option<&Corpus>,
    cfg: &TrainConfig,
) -> Result<TrainReport, NeuralError> {
    if train.is_empty() {
        return Err(NeuralError::EmptyCorpus);
    }
    for u in train.utterances() {
        model.check_features(&u.features)?;
    }
    let targets = model.targets(train)?;
    let keys = model.length_keys(train);
    let frozen = model.clone();
    let mut store = std::mem::take(&mut model.store);
    let report = run_training(
        &mut store,
        &keys,
        cfg,
        "las",
        |tape, store, batch| {
            let (nll, _, _, mask) = frozen.batch_forward(tape, store, train, &targets, batch);
            (nll, mask.iter().sum())
        },
        |store| {
            let d = dev?;
            let mut m = frozen.clone();
            m.store = store.clone();
            let loss = m.corpus_loss(d);
            debug!("dev loss {loss:?}");
            loss.ok()
        },
    );
    model.store = store;
    report
}
