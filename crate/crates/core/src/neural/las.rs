use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::autodiff::{Backend, Eval, ParamStore};
use super::layers::{interleave, pad_targets, stack_frames, AttnDecoder, Encoder, Init, Memory, RecurrentState};
use super::matrix::Matrix;
use super::NeuralError;
use crate::corpus::FeatureSequence;
use crate::seed::rng_for;
use crate::units::{UnitCodec, UnitId, EOS, SOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LasConfig {
    pub input_dim: usize,
    pub subsample: usize,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub encoder_proj: usize,
    pub decoder_layers: usize,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
    pub embedding_dim: usize,
    pub vocab_size: usize,
}

impl LasConfig {
    /// The default desk-scale model.
    pub fn desk(input_dim: usize, vocab_size: usize) -> Self {
        Self {
            input_dim,
            subsample: 4,
            encoder_layers: 2,
            encoder_hidden: 64,
            encoder_proj: 64,
            decoder_layers: 1,
            decoder_hidden: 64,
            attention_dim: 64,
            embedding_dim: 32,
            vocab_size,
        }
    }

    /// Reference sizes of the full-scale systems; kept for documentation
    /// and never trained here. Decoder widths follow the encoder width.
    pub fn reference(name: &str, input_dim: usize, vocab_size: usize) -> Option<Self> {
        let (layers, hidden, dec_layers) = match name {
            "small" => (3, 256, 1),
            "medium" => (4, 512, 2),
            "large" => (4, 1024, 2),
            _ => return None,
        };
        Some(Self {
            input_dim,
            subsample: 4,
            encoder_layers: layers,
            encoder_hidden: hidden,
            encoder_proj: hidden,
            decoder_layers: dec_layers,
            decoder_hidden: hidden,
            attention_dim: hidden,
            embedding_dim: hidden,
            vocab_size,
        })
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let sizes = [
            ("input_dim", self.input_dim),
            ("subsample", self.subsample),
            ("encoder_layers", self.encoder_layers),
            ("encoder_hidden", self.encoder_hidden),
            ("encoder_proj", self.encoder_proj),
            ("decoder_layers", self.decoder_layers),
            ("decoder_hidden", self.decoder_hidden),
            ("attention_dim", self.attention_dim),
            ("embedding_dim", self.embedding_dim),
            ("vocab_size", self.vocab_size),
        ];
        match sizes.iter().find(|(_, v)| *v == 0) {
            Some((k, _)) => Err(NeuralError::Config(format!("{k} must be at least 1"))),
            None => Ok(()),
        }
    }
}

/// Encoder output for one utterance.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub(crate) values: Arc<Matrix>,
    pub(crate) keys: Arc<Matrix>,
    pub(crate) steps: usize,
}

impl Encoded {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn states(&self) -> &Matrix {
        &self.values
    }

    pub(crate) fn memory(&self) -> Memory<Arc<Matrix>> {
        Memory {
            values: Arc::clone(&self.values),
            keys: Arc::clone(&self.keys),
            steps: self.steps,
        }
    }
}

/// Decoder recurrent state of a single hypothesis (all rows are 1×n).
#[derive(Clone, Debug)]
pub struct DecoderState(pub(crate) RecurrentState<Arc<Matrix>>);

impl DecoderState {
    /// Per-layer `(h, c)` rows.
    pub fn layers(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.0.h.iter().zip(&self.0.c).map(|(h, c)| (h.data(), c.data()))
    }
}

pub(crate) fn stack_states(states: &[&RecurrentState<Arc<Matrix>>]) -> RecurrentState<Arc<Matrix>> {
    let mut be = Eval;
    let layers = states[0].h.len();
    let cat = |be: &mut Eval, f: &dyn Fn(&RecurrentState<Arc<Matrix>>) -> Arc<Matrix>| {
        be.concat_rows(&states.iter().map(|s| f(s)).collect::<Vec<_>>())
    };
    RecurrentState {
        h: (0..layers).map(|l| cat(&mut be, &|s| Arc::clone(&s.h[l]))).collect(),
        c: (0..layers).map(|l| cat(&mut be, &|s| Arc::clone(&s.c[l]))).collect(),
        ctx: cat(&mut be, &|s| Arc::clone(&s.ctx)),
    }
}

pub(crate) fn split_state(state: &RecurrentState<Arc<Matrix>>, rows: usize) -> Vec<RecurrentState<Arc<Matrix>>> {
    let row = |m: &Matrix, r: usize| Arc::new(m.slice_rows(r, r + 1));
    (0..rows)
        .map(|r| RecurrentState {
            h: state.h.iter().map(|m| row(m, r)).collect(),
            c: state.c.iter().map(|m| row(m, r)).collect(),
            ctx: row(&state.ctx, r),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LasModel {
    pub(crate) config: LasConfig,
    pub(crate) codec: UnitCodec,
    pub(crate) store: ParamStore,
    pub(crate) encoder: Encoder,
    pub(crate) decoder: AttnDecoder,
}

impl LasModel {
    /// Uniform ±0.1 initialization (forget bias 1, output layer zero).
    pub fn new(config: LasConfig, codec: UnitCodec, seed: u64) -> Result<Self, NeuralError> {
        let mut rng = rng_for(seed, "las-init");
        Self::build(config, codec, Init::Uniform(&mut rng))
    }

    pub(crate) fn build(config: LasConfig, codec: UnitCodec, mut init: Init) -> Result<Self, NeuralError> {
        config.validate()?;
        if config.vocab_size != codec.inventory().len() {
            return Err(NeuralError::Config(format!(
                "vocab_size {} does not match the inventory size {}",
                config.vocab_size,
                codec.inventory().len()
            )));
        }
        let mut store = ParamStore::new();
        let c = &config;
        let encoder = Encoder::new(
            &mut store,
            &mut init,
            c.input_dim * c.subsample,
            c.encoder_layers,
            c.encoder_hidden,
            c.encoder_proj,
        );
        let decoder = AttnDecoder::new(
            &mut store,
            &mut init,
            "dec",
            c.vocab_size,
            c.embedding_dim,
            c.decoder_layers,
            c.decoder_hidden,
            c.encoder_proj,
            c.attention_dim,
        );
        Ok(Self {
            config,
            codec,
            store,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &LasConfig {
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

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn encoder_steps(&self, num_frames: usize) -> usize {
        num_frames.div_ceil(self.config.subsample)
    }

    pub(crate) fn check_features(&self, f: &FeatureSequence) -> Result<(), NeuralError> {
        if f.dim() != self.config.input_dim {
            return Err(NeuralError::Dim {
                expected: self.config.input_dim,
                got: f.dim(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_units(&self, units: &[UnitId]) -> Result<(), NeuralError> {
        match units.iter().find(|&&u| u as usize >= self.config.vocab_size) {
            Some(&u) => Err(NeuralError::BadUnit(u)),
            None => Ok(()),
        }
    }

    /// Stacked input frames for a batch of same-length utterances, time-major.
    pub(crate) fn batch_input(&self, feats: &[&FeatureSequence]) -> Matrix {
        let stacked: Vec<Matrix> = feats
            .iter()
            .map(|f| stack_frames(f.as_slice(), f.num_frames(), f.dim(), self.config.subsample))
            .collect();
        interleave(&stacked.iter().collect::<Vec<_>>())
    }

    /// Encoder states, ⌈T/subsample⌉ rows.
    pub fn encode(&self, features: &FeatureSequence) -> Result<Encoded, NeuralError> {
        self.check_features(features)?;
        let mut be = Eval;
        let x = Arc::new(self.batch_input(&[features]));
        let steps = x.rows();
        let values = self.encoder.forward(&mut be, &self.store, &x, steps, 1);
        let memory = Memory::new(&mut be, &self.store, &self.decoder.attention, values, steps);
        Ok(Encoded {
            values: memory.values,
            keys: memory.keys,
            steps,
        })
    }

    /// Attention weights and context for a single decoder query state.
    pub fn attend(&self, enc: &Encoded, query: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut be = Eval;
        let q = Arc::new(Matrix::from_vec(1, query.len(), query.to_vec()));
        let wq = be.param(&self.store, self.decoder.attention.wq);
        let v = be.param(&self.store, self.decoder.attention.v);
        let qw = be.matmul(&q, &wq);
        let spec = super::autodiff::AttentionSpec {
            steps: enc.steps,
            groups: Arc::from(vec![0]),
        };
        let (ctx, alpha) = be.attention(&qw, &enc.keys, &enc.values, &v, &spec);
        (alpha.into_vec(), (*ctx).clone().into_vec())
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState(self.decoder.zero_state(&mut Eval, 1))
    }

    /// One decoder step for several hypotheses sharing `enc`. Returns the
    /// new states and the B×V log-probabilities.
    pub fn step(&self, enc: &Encoded, states: &[&DecoderState], prev: &[UnitId]) -> (Vec<DecoderState>, Matrix) {
        let mut be = Eval;
        let b = states.len();
        let stacked = stack_states(&states.iter().map(|s| &s.0).collect::<Vec<_>>());
        let prev: Vec<usize> = prev.iter().map(|&u| u as usize).collect();
        let groups: Arc<[usize]> = Arc::from(vec![0; b]);
        let (next, feat) = self.decoder.step(&mut be, &self.store, &enc.memory(), &groups, &stacked, &prev);
        let logits = self.decoder.output.apply(&mut be, &self.store, &feat);
        let logp = be.log_softmax(&logits);
        let out = split_state(&next, b).into_iter().map(DecoderState).collect();
        (out, (*logp).clone())
    }

    /// Teacher-forced log-probability of `units` followed by EOS.
    pub fn score_sequence(&self, features: &FeatureSequence, units: &[UnitId]) -> Result<f64, NeuralError> {
        Ok(self.score_sequences(features, &[units.to_vec()])?[0])
    }

    /// [`Self::score_sequence`] for several sequences against one utterance.
    pub fn score_sequences(&self, features: &FeatureSequence, seqs: &[Vec<UnitId>]) -> Result<Vec<f64>, NeuralError> {
        let enc = self.encode(features)?;
        self.score_encoded(&enc, seqs)
    }

    pub fn score_encoded(&self, enc: &Encoded, seqs: &[Vec<UnitId>]) -> Result<Vec<f64>, NeuralError> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        for s in seqs {
            self.check_units(s)?;
        }
        let (per_step, _) = self.teacher_forced_logp(enc, seqs);
        Ok(per_step.iter().map(|steps| steps.iter().sum()).collect())
    }

    /// Per-sequence, per-step target log-probabilities (EOS included) and the
    /// per-step decoder states.
    pub(crate) fn teacher_forced_logp(
        &self,
        enc: &Encoded,
        seqs: &[Vec<UnitId>],
    ) -> (Vec<Vec<f64>>, Vec<RecurrentState<Arc<Matrix>>>) {
        let mut be = Eval;
        let b = seqs.len();
        let targets: Vec<Vec<usize>> = seqs
            .iter()
            .map(|s| s.iter().map(|&u| u as usize).chain([EOS as usize]).collect())
            .collect();
        let (inputs, flat, mask) = pad_targets(&targets, SOS as usize);
        let groups: Arc<[usize]> = Arc::from(vec![0; b]);
        let init = self.decoder.zero_state(&mut be, b);
        let (feats, states) = self.decoder.teacher_force(&mut be, &self.store, &enc.memory(), &groups, init, &inputs);
        let logits = self.decoder.output.apply(&mut be, &self.store, &feats);
        let logp = be.log_softmax(&logits);
        let mut out = vec![Vec::new(); b];
        for (i, (&t, &m)) in flat.iter().zip(&mask).enumerate() {
            if m > 0.0 {
                out[i % b].push(logp.get(i, t));
            }
        }
        (out, states)
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        write_checkpoint(path, "las", &self.config, &self.codec, &[&self.store])
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let ck = read_checkpoint(path, "las")?;
        let config: LasConfig = serde_json::from_value(ck.config).map_err(|e| ck_err(path, e))?;
        let codec: UnitCodec = serde_json::from_value(ck.codec).map_err(|e| ck_err(path, e))?;
        let mut model = Self::build(config, codec, Init::Zero)?;
        fill_store(&mut model.store, &ck.tensors, path)?;
        Ok(model)
    }
}

pub(crate) fn ck_err(path: &Path, e: impl std::fmt::Display) -> NeuralError {
    NeuralError::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

pub(crate) struct Checkpoint {
    pub config: serde_json::Value,
    pub codec: serde_json::Value,
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

/// Text checkpoint: a JSON header line, then `TENSOR name rows cols`
/// followed by one line of values per row. Values use the shortest
/// round-tripping decimal form, so reloading is bit-exact.
pub(crate) fn write_checkpoint<C: Serialize, K: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    codec: &K,
    stores: &[&ParamStore],
) -> Result<(), NeuralError> {
    write_checkpoint_extra(path, kind, config, codec, &serde_json::Value::Null, stores)
}

pub(crate) fn write_checkpoint_extra<C: Serialize, K: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    codec: &K,
    extra: &serde_json::Value,
    stores: &[&ParamStore],
) -> Result<(), NeuralError> {
    let header = serde_json::json!({
        "kind": kind,
        "config": config,
        "codec": codec,
        "extra": extra,
    });
    let mut out = String::from("unitlab-checkpoint 1\n");
    out.push_str(&serde_json::to_string(&header).map_err(|e| ck_err(path, e))?);
    out.push('\n');
    for store in stores {
        for id in store.ids() {
            let m = store.get(id);
            writeln!(out, "TENSOR {} {} {}", store.name(id), m.rows(), m.cols()).unwrap();
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|x| format!("{x:?}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
    }
    std::fs::write(path, out).map_err(|e| NeuralError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub(crate) fn read_checkpoint(path: &Path, kind: &str) -> Result<Checkpoint, NeuralError> {
    let text = std::fs::read_to_string(path).map_err(|e| NeuralError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = text.lines();
    if lines.next() != Some("unitlab-checkpoint 1") {
        return Err(ck_err(path, "missing checkpoint magic line"));
    }
    let header: serde_json::Value =
        serde_json::from_str(lines.next().unwrap_or_default()).map_err(|e| ck_err(path, e))?;
    if header["kind"] != kind {
        return Err(ck_err(path, format!("expected a `{kind}` checkpoint, found {}", header["kind"])));
    }
    let mut tensors = Vec::new();
    while let Some(line) = lines.next() {
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 4 || f[0] != "TENSOR" {
            return Err(ck_err(path, format!("bad tensor header `{line}`")));
        }
        let rows: usize = f[2].parse().map_err(|e| ck_err(path, e))?;
        let cols: usize = f[3].parse().map_err(|e| ck_err(path, e))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = lines.next().ok_or_else(|| ck_err(path, "truncated tensor"))?;
            for x in row.split(' ').filter(|x| !x.is_empty()) {
                data.push(x.parse::<f64>().map_err(|e| ck_err(path, e))?);
            }
        }
        if data.len() != rows * cols {
            return Err(ck_err(path, format!("tensor {} has the wrong number of values", f[1])));
        }
        tensors.push((f[1].to_string(), Matrix::from_vec(rows, cols, data)));
    }
    Ok(Checkpoint {
        config: header["config"].clone(),
        codec: header["codec"].clone(),
        extra: header["extra"].clone(),
        tensors,
    })
}

pub(crate) fn fill_store(store: &mut ParamStore, tensors: &[(String, Matrix)], path: &Path) -> Result<(), NeuralError> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let (_, m) = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ck_err(path, format!("missing tensor {name}")))?;
        if m.shape() != store.get(id).shape() {
            return Err(ck_err(path, format!("tensor {name} has shape {:?}", m.shape())));
        }
        *store.get_mut(id) = m.clone();
    }
    Ok(())
}
