use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::autodiff::{Backend, Eval, ParamStore, Tape, Var};
use super::las::{ck_err, fill_store, read_checkpoint, write_checkpoint_extra, LasConfig, LasModel};
use super::layers::{pad_targets, AttnDecoder, Init, Memory, RecurrentState};
use super::matrix::Matrix;
use super::train::{run_training, TrainConfig, TrainReport};
use super::NeuralError;
use crate::corpus::{Corpus, FeatureSequence};
use crate::seed::rng_for;
use crate::units::{PhonemeCodec, UnitCodec, UnitId, SOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxConfig {
    pub embedding_dim: usize,
    pub attention_dim: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            attention_dim: 64,
        }
    }
}

/// A frozen LAS model plus a second attention decoder that spells each
/// word in phonemes, restarted from the main decoder state at every word
/// boundary.
#[derive(Clone, Debug)]
pub struct AuxDecoderModel {
    base: LasModel,
    config: AuxConfig,
    codec: PhonemeCodec,
    store: ParamStore,
    decoder: AttnDecoder,
}

/// Teacher-forced main-decoder inputs for one utterance: where each word
/// starts in the base unit sequence, and its auxiliary target.
struct WordTargets {
    starts: Vec<usize>,
    aux: Vec<Vec<usize>>,
}

impl AuxDecoderModel {
    pub fn new(base: LasModel, codec: PhonemeCodec, config: AuxConfig, seed: u64) -> Result<Self, NeuralError> {
        let mut rng = rng_for(seed, "aux-init");
        Self::build(base, codec, config, Init::Uniform(&mut rng))
    }

    fn build(base: LasModel, codec: PhonemeCodec, config: AuxConfig, mut init: Init) -> Result<Self, NeuralError> {
        let kind = base.codec().kind();
        if !kind.word_recoverable() {
            return Err(NeuralError::NotWordRecoverable(kind.name()));
        }
        if config.embedding_dim == 0 || config.attention_dim == 0 {
            return Err(NeuralError::Config("auxiliary sizes must be at least 1".into()));
        }
        let bc: &LasConfig = base.config();
        let mut store = ParamStore::new();
        let decoder = AttnDecoder::new(
            &mut store,
            &mut init,
            "aux",
            codec.inventory.len(),
            config.embedding_dim,
            bc.decoder_layers,
            bc.decoder_hidden,
            bc.encoder_proj,
            config.attention_dim,
        );
        Ok(Self {
            base,
            config,
            codec,
            store,
            decoder,
        })
    }

    pub fn base(&self) -> &LasModel {
        &self.base
    }

    pub fn codec(&self) -> &PhonemeCodec {
        &self.codec
    }

    /// Auxiliary parameters only.
    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Auxiliary target of every word: its phonemes then `<eow>`.
    pub fn aux_targets(&self, words: &[String]) -> Vec<Vec<UnitId>> {
        words.iter().map(|w| self.codec.encode_word(w)).collect()
    }

    fn word_targets(&self, words: &[String]) -> Result<(Vec<usize>, WordTargets), NeuralError> {
        let mut units = Vec::new();
        let mut starts = Vec::with_capacity(words.len());
        for w in words {
            starts.push(units.len());
            units.extend(self.base.codec().encode(std::slice::from_ref(w)));
        }
        self.base.check_units(&units)?;
        let aux = words
            .iter()
            .map(|w| self.codec.encode_word(w).into_iter().map(|u| u as usize).collect())
            .collect();
        let units = units.into_iter().map(|u| u as usize).chain([crate::units::EOS as usize]).collect();
        Ok((units, WordTargets { starts, aux }))
    }

    /// Runs the frozen base on a batch of same-length utterances. Returns
    /// the encoder values and, per word across the batch, the copied main
    /// decoder state, its utterance index and its auxiliary target.
    #[allow(clippy::type_complexity)]
    fn base_pass(
        &self,
        feats: &[&FeatureSequence],
        words: &[&[String]],
    ) -> Result<(Arc<Matrix>, usize, RecurrentState<Arc<Matrix>>, Vec<usize>, Vec<Vec<usize>>), NeuralError> {
        let base = &self.base;
        let mut be = Eval;
        let g = feats.len();
        let x = Arc::new(base.batch_input(feats));
        let steps = base.encoder_steps(feats[0].num_frames());
        let values = base.encoder.forward(&mut be, &base.store, &x, steps, g);
        let memory = Memory::new(&mut be, &base.store, &base.decoder.attention, Arc::clone(&values), steps);
        let mut seqs = Vec::with_capacity(g);
        let mut per_utt = Vec::with_capacity(g);
        for w in words {
            let (units, t) = self.word_targets(w)?;
            seqs.push(units);
            per_utt.push(t);
        }
        let (inputs, _, _) = pad_targets(&seqs, SOS as usize);
        let groups: Arc<[usize]> = Arc::from((0..g).collect::<Vec<_>>());
        let init = base.decoder.zero_state(&mut be, g);
        let (_, states) = base.decoder.teacher_force(&mut be, &base.store, &memory, &groups, init, &inputs);
        // rows to copy: state at step s of utterance j is row j of states[s]
        let mut picks = Vec::new();
        let mut owner = Vec::new();
        let mut aux = Vec::new();
        for (j, t) in per_utt.into_iter().enumerate() {
            for (&s, target) in t.starts.iter().zip(t.aux) {
                picks.push((s, j));
                owner.push(j);
                aux.push(target);
            }
        }
        let gather = |f: &dyn Fn(&RecurrentState<Arc<Matrix>>) -> &Arc<Matrix>| {
            let cols = f(&states[0]).cols();
            let mut m = Matrix::zeros(picks.len(), cols);
            for (r, &(s, j)) in picks.iter().enumerate() {
                m.row_mut(r).copy_from_slice(f(&states[s]).row(j));
            }
            Arc::new(m)
        };
        let layers = base.decoder.layers.len();
        let init = RecurrentState {
            h: (0..layers).map(|l| gather(&|s| &s.h[l])).collect(),
            c: (0..layers).map(|l| gather(&|s| &s.c[l])).collect(),
            ctx: gather(&|s| &s.ctx),
        };
        Ok((values, steps, init, owner, aux))
    }

    /// Summed auxiliary NLL over the words of a base pass, and per-row
    /// target log-probabilities through `logits`.
    #[allow(clippy::too_many_arguments)]
    fn aux_forward<B: Backend>(
        &self,
        be: &mut B,
        store: &ParamStore,
        values: &Arc<Matrix>,
        steps: usize,
        init: &RecurrentState<Arc<Matrix>>,
        owner: Vec<usize>,
        aux: &[Vec<usize>],
    ) -> (B::V, B::V, Vec<usize>, Vec<f64>) {
        let values = be.shared_constant(Arc::clone(values));
        let memory = Memory::new(be, store, &self.decoder.attention, values, steps);
        let state = RecurrentState {
            h: init.h.iter().map(|m| be.shared_constant(Arc::clone(m))).collect(),
            c: init.c.iter().map(|m| be.shared_constant(Arc::clone(m))).collect(),
            ctx: be.shared_constant(Arc::clone(&init.ctx)),
        };
        let (inputs, flat, mask) = pad_targets(aux, SOS as usize);
        let groups: Arc<[usize]> = Arc::from(owner);
        let (feats, _) = self.decoder.teacher_force(be, store, &memory, &groups, state, &inputs);
        let logits = self.decoder.output.apply(be, store, &feats);
        let nll = be.cross_entropy(&logits, &flat, &mask);
        (nll, logits, flat, mask)
    }

    /// Summed auxiliary log-probability of every word of `words`.
    pub fn aux_score(&self, features: &FeatureSequence, words: &[String]) -> Result<f64, NeuralError> {
        Ok(self.aux_word_scores(features, words)?.iter().sum())
    }

    /// Auxiliary log-probability of each word, in order.
    pub fn aux_word_scores(&self, features: &FeatureSequence, words: &[String]) -> Result<Vec<f64>, NeuralError> {
        self.base.check_features(features)?;
        if words.is_empty() {
            return Ok(Vec::new());
        }
        let (values, steps, init, owner, aux) = self.base_pass(&[features], &[words])?;
        let mut be = Eval;
        let (_, logits, flat, mask) = self.aux_forward(&mut be, &self.store, &values, steps, &init, owner, &aux);
        let logp = be.log_softmax(&logits);
        let n = aux.len();
        let mut out = vec![0.0; n];
        for (i, (&t, &m)) in flat.iter().zip(&mask).enumerate() {
            if m > 0.0 {
                out[i % n] += logp.get(i, t);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let extra = serde_json::json!({
            "base_config": self.base.config(),
            "base_codec": self.base.codec(),
        });
        write_checkpoint_extra(path, "aux", &self.config, &self.codec, &extra, &[&self.base.store, &self.store])
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let ck = read_checkpoint(path, "aux")?;
        let config: AuxConfig = serde_json::from_value(ck.config).map_err(|e| ck_err(path, e))?;
        let codec: PhonemeCodec = serde_json::from_value(ck.codec).map_err(|e| ck_err(path, e))?;
        let base_config: LasConfig =
            serde_json::from_value(ck.extra["base_config"].clone()).map_err(|e| ck_err(path, e))?;
        let base_codec: UnitCodec =
            serde_json::from_value(ck.extra["base_codec"].clone()).map_err(|e| ck_err(path, e))?;
        let mut base = LasModel::build(base_config, base_codec, Init::Zero)?;
        fill_store(&mut base.store, &ck.tensors, path)?;
        let mut model = Self::build(base, codec, config, Init::Zero)?;
        fill_store(&mut model.store, &ck.tensors, path)?;
        Ok(model)
    }
}

/// Trains only the auxiliary decoder; the base model is read, never
/// written.
pub fn aux_train(
    base: &LasModel,
    corpus: &Corpus,
    codec: PhonemeCodec,
    config: AuxConfig,
    cfg: &TrainConfig,
) -> Result<(AuxDecoderModel, TrainReport), NeuralError> {
    if corpus.is_empty() {
        return Err(NeuralError::EmptyCorpus);
    }
    let mut model = AuxDecoderModel::new(base.clone(), codec, config, cfg.seed)?;
    let utts = corpus.utterances();
    for u in utts {
        model.base.check_features(&u.features)?;
        model.word_targets(&u.transcript)?;
    }
    let keys: Vec<usize> = utts.iter().map(|u| base.encoder_steps(u.features.num_frames())).collect();
    let frozen = model.clone();
    let mut store = std::mem::take(&mut model.store);
    let report = run_training(
        &mut store,
        &keys,
        cfg,
        "aux",
        |tape: &mut Tape, store, batch| -> (Var, f64) {
            let feats: Vec<_> = batch.iter().map(|&i| &utts[i].features).collect();
            let words: Vec<_> = batch.iter().map(|&i| utts[i].transcript.as_slice()).collect();
            let (values, steps, init, owner, aux) = frozen.base_pass(&feats, &words).expect("validated above");
            let (nll, _, _, mask) = frozen.aux_forward(tape, store, &values, steps, &init, owner, &aux);
            (nll, mask.iter().sum())
        },
        |_| None,
    )?;
    model.store = store;
    Ok((model, report))
}
