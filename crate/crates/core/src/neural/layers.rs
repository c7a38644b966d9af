use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::autodiff::{AttentionSpec, Backend, ParamId, ParamStore};
use super::matrix::Matrix;

pub(crate) const INIT_SCALE: f64 = 0.1;

/// How fresh parameters are filled.
pub(crate) enum Init<'a> {
    Uniform(&'a mut ChaCha8Rng),
    /// Placeholder values (overwritten by a checkpoint load).
    Zero,
}

impl Init<'_> {
    pub(crate) fn uniform(&mut self, name: &str, store: &mut ParamStore, rows: usize, cols: usize) -> ParamId {
        let m = match self {
            Init::Uniform(rng) => Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE)).collect(),
            ),
            Init::Zero => Matrix::zeros(rows, cols),
        };
        store.add(name, m)
    }

    pub(crate) fn zeros(&mut self, name: &str, store: &mut ParamStore, rows: usize, cols: usize) -> ParamId {
        store.add(name, Matrix::zeros(rows, cols))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, input: usize, hidden: usize) -> Self {
        let wx = init.uniform(&format!("{name}.wx"), store, input, 4 * hidden);
        let wh = init.uniform(&format!("{name}.wh"), store, hidden, 4 * hidden);
        let b = init.zeros(&format!("{name}.b"), store, 1, 4 * hidden);
        if matches!(init, Init::Uniform(_)) {
            // forget-gate bias starts at one
            store.get_mut(b).data_mut()[hidden..2 * hidden].fill(1.0);
        }
        Self { wx, wh, b, hidden }
    }

    /// One step from precomputed `x · Wx`.
    pub fn step_pre<B: Backend>(&self, be: &mut B, store: &ParamStore, xw: &B::V, h: &B::V, c: &B::V) -> (B::V, B::V) {
        let wh = be.param(store, self.wh);
        let b = be.param(store, self.b);
        let hw = be.matmul(h, &wh);
        let g = be.add(xw, &hw);
        let g = be.add_row(&g, &b);
        let hc = be.lstm_cell(&g, c);
        let h2 = be.slice_cols(&hc, 0, self.hidden);
        let c2 = be.slice_cols(&hc, self.hidden, 2 * self.hidden);
        (h2, c2)
    }

    pub fn step<B: Backend>(&self, be: &mut B, store: &ParamStore, x: &B::V, h: &B::V, c: &B::V) -> (B::V, B::V) {
        let wx = be.param(store, self.wx);
        let xw = be.matmul(x, &wx);
        self.step_pre(be, store, &xw, h, c)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, input: usize, output: usize, zero: bool) -> Self {
        let w = if zero {
            init.zeros(&format!("{name}.w"), store, input, output)
        } else {
            init.uniform(&format!("{name}.w"), store, input, output)
        };
        let b = init.zeros(&format!("{name}.b"), store, 1, output);
        Self { w, b }
    }

    pub fn apply<B: Backend>(&self, be: &mut B, store: &ParamStore, x: &B::V) -> B::V {
        let w = be.param(store, self.w);
        let b = be.param(store, self.b);
        let y = be.matmul(x, &w);
        be.add_row(&y, &b)
    }
}

/// Stack of bidirectional LSTM layers, each followed by a linear projection.
#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    pub layers: Vec<(Lstm, Lstm, Linear)>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, input: usize, layers: usize, hidden: usize, proj: usize) -> Self {
        let mut out = Vec::with_capacity(layers);
        let mut dim = input;
        for l in 0..layers {
            let f = Lstm::new(store, init, &format!("enc{l}.fwd"), dim, hidden);
            let b = Lstm::new(store, init, &format!("enc{l}.bwd"), dim, hidden);
            let p = Linear::new(store, init, &format!("enc{l}.proj"), 2 * hidden, proj, false);
            out.push((f, b, p));
            dim = proj;
        }
        Self { layers: out }
    }

    /// `x` is time-major (row `t * groups + g`); the output keeps that layout.
    pub fn forward<B: Backend>(&self, be: &mut B, store: &ParamStore, x: &B::V, steps: usize, groups: usize) -> B::V {
        let mut x = x.clone();
        for (fwd, bwd, proj) in &self.layers {
            let h = fwd.hidden;
            let run = |be: &mut B, lstm: &Lstm, reverse: bool| -> Vec<B::V> {
                let wx = be.param(store, lstm.wx);
                let xw = be.matmul(&x, &wx);
                let mut hs = be.constant(Matrix::zeros(groups, h));
                let mut cs = hs.clone();
                let mut outs: Vec<Option<B::V>> = vec![None; steps];
                let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
                for t in order {
                    let xt = be.slice_rows(&xw, t * groups, (t + 1) * groups);
                    let (h2, c2) = lstm.step_pre(be, store, &xt, &hs, &cs);
                    outs[t] = Some(h2.clone());
                    hs = h2;
                    cs = c2;
                }
                outs.into_iter().map(|o| o.expect("every step visited")).collect()
            };
            let f = run(be, fwd, false);
            let b = run(be, bwd, true);
            let f = be.concat_rows(&f);
            let b = be.concat_rows(&b);
            let both = be.concat_cols(&[f, b]);
            x = proj.apply(be, store, &both);
        }
        x
    }
}

/// Additive attention parameters: `W_q`, `W_h` and `v`.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub v: ParamId,
}

impl Attention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, query: usize, key: usize, dim: usize) -> Self {
        Self {
            wq: init.uniform(&format!("{name}.wq"), store, query, dim),
            wk: init.uniform(&format!("{name}.wk"), store, key, dim),
            v: init.uniform(&format!("{name}.v"), store, dim, 1),
        }
    }
}

/// Encoder states with their attention projection, ready for decoding.
pub(crate) struct Memory<V> {
    pub values: V,
    pub keys: V,
    pub steps: usize,
}

impl<V: Clone> Memory<V> {
    pub fn new<B: Backend<V = V>>(be: &mut B, store: &ParamStore, att: &Attention, values: V, steps: usize) -> Self {
        let wk = be.param(store, att.wk);
        let keys = be.matmul(&values, &wk);
        Self { values, keys, steps }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct RecurrentState<V> {
    pub h: Vec<V>,
    pub c: Vec<V>,
    pub ctx: V,
}

/// Attention decoder: input `[emb(prev); previous context]`, an LSTM stack,
/// then `[h; context]` into the output projection.
#[derive(Clone, Debug)]
pub(crate) struct AttnDecoder {
    pub embedding: ParamId,
    pub layers: Vec<Lstm>,
    pub attention: Attention,
    pub output: Linear,
    pub hidden: usize,
    pub context: usize,
}

impl AttnDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        vocab: usize,
        emb: usize,
        layers: usize,
        hidden: usize,
        context: usize,
        att_dim: usize,
    ) -> Self {
        let embedding = init.uniform(&format!("{name}.emb"), store, vocab, emb);
        let mut ls = Vec::with_capacity(layers);
        for l in 0..layers {
            let input = if l == 0 { emb + context } else { hidden };
            ls.push(Lstm::new(store, init, &format!("{name}.lstm{l}"), input, hidden));
        }
        let attention = Attention::new(store, init, &format!("{name}.att"), hidden, context, att_dim);
        let output = Linear::new(store, init, &format!("{name}.out"), hidden + context, vocab, true);
        Self {
            embedding,
            layers: ls,
            attention,
            output,
            hidden,
            context,
        }
    }

    pub fn zero_state<B: Backend>(&self, be: &mut B, batch: usize) -> RecurrentState<B::V> {
        let z = be.constant(Matrix::zeros(batch, self.hidden));
        RecurrentState {
            h: vec![z.clone(); self.layers.len()],
            c: vec![z; self.layers.len()],
            ctx: be.constant(Matrix::zeros(batch, self.context)),
        }
    }

    /// One step for a batch; returns the new state and the `[h; ctx]`
    /// features that feed the output layer.
    pub fn step<B: Backend>(
        &self,
        be: &mut B,
        store: &ParamStore,
        memory: &Memory<B::V>,
        groups: &Arc<[usize]>,
        state: &RecurrentState<B::V>,
        prev: &[usize],
    ) -> (RecurrentState<B::V>, B::V) {
        let table = be.param(store, self.embedding);
        let emb = be.gather_rows(&table, prev);
        let mut x = be.concat_cols(&[emb, state.ctx.clone()]);
        let mut hs = Vec::with_capacity(self.layers.len());
        let mut cs = Vec::with_capacity(self.layers.len());
        for (l, lstm) in self.layers.iter().enumerate() {
            let (h, c) = lstm.step(be, store, &x, &state.h[l], &state.c[l]);
            x = h.clone();
            hs.push(h);
            cs.push(c);
        }
        let wq = be.param(store, self.attention.wq);
        let v = be.param(store, self.attention.v);
        let q = be.matmul(&x, &wq);
        let spec = AttentionSpec {
            steps: memory.steps,
            groups: Arc::clone(groups),
        };
        let (ctx, _) = be.attention(&q, &memory.keys, &memory.values, &v, &spec);
        let feat = be.concat_cols(&[x, ctx.clone()]);
        (RecurrentState { h: hs, c: cs, ctx }, feat)
    }

    /// Teacher-forced features for `inputs[s][b]` (time-major rows
    /// `s * batch + b`), starting from `state`. Also returns the state
    /// after every step.
    pub fn teacher_force<B: Backend>(
        &self,
        be: &mut B,
        store: &ParamStore,
        memory: &Memory<B::V>,
        groups: &Arc<[usize]>,
        mut state: RecurrentState<B::V>,
        inputs: &[Vec<usize>],
    ) -> (B::V, Vec<RecurrentState<B::V>>) {
        let mut feats = Vec::with_capacity(inputs.len());
        let mut states = Vec::with_capacity(inputs.len());
        for prev in inputs {
            let (s, f) = self.step(be, store, memory, groups, &state, prev);
            feats.push(f);
            states.push(s.clone());
            state = s;
        }
        (be.concat_rows(&feats), states)
    }
}

/// Pads target sequences (each already ending in its terminator) into
/// time-major decoder inputs, flat targets and a 0/1 mask.
pub(crate) fn pad_targets(seqs: &[Vec<usize>], start: usize) -> (Vec<Vec<usize>>, Vec<usize>, Vec<f64>) {
    let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let b = seqs.len();
    let mut inputs = vec![vec![start; b]; steps];
    let mut targets = vec![0; steps * b];
    let mut mask = vec![0.0; steps * b];
    for (j, seq) in seqs.iter().enumerate() {
        for (s, &u) in seq.iter().enumerate() {
            targets[s * b + j] = u;
            mask[s * b + j] = 1.0;
            if s + 1 < steps {
                inputs[s + 1][j] = u;
            }
        }
    }
    (inputs, targets, mask)
}

/// Frames stacked in non-overlapping groups of `factor` (zero-padded tail).
pub(crate) fn stack_frames(frames: &[f64], num_frames: usize, dim: usize, factor: usize) -> Matrix {
    let steps = num_frames.div_ceil(factor);
    let mut out = Matrix::zeros(steps, dim * factor);
    for t in 0..num_frames {
        let (s, k) = (t / factor, t % factor);
        out.row_mut(s)[k * dim..(k + 1) * dim].copy_from_slice(&frames[t * dim..(t + 1) * dim]);
    }
    out
}

/// Interleaves per-utterance step matrices (each steps × d) time-major.
pub(crate) fn interleave(items: &[&Matrix]) -> Matrix {
    let g = items.len();
    let (steps, d) = items[0].shape();
    let mut out = Matrix::zeros(steps * g, d);
    for (j, m) in items.iter().enumerate() {
        assert_eq!(m.shape(), (steps, d), "equal step counts within a batch");
        for t in 0..steps {
            out.row_mut(t * g + j).copy_from_slice(m.row(t));
        }
    }
    out
}
