//! Reverse-mode differentiation over dense matrices.
//!
//! Model code is written once against [`Backend`]. [`Eval`] computes values
//! only; [`Tape`] records every op so [`Tape::backward`] can return
//! gradients for the parameters that were read.

use std::collections::HashMap;
use std::sync::Arc;

use super::matrix::{axpy, dot, log_softmax_rows, matmul, matmul_at_acc, matmul_bt_acc, sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter matrices, shared cheaply with backends.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Matrix>>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a == b)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn shared(&self, id: ParamId) -> Arc<Matrix> {
        Arc::clone(&self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// FNV-1a over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (n, v) in self.names.iter().zip(&self.values) {
            eat(n.as_bytes());
            eat(&(v.rows() as u64).to_le_bytes());
            eat(&(v.cols() as u64).to_le_bytes());
            for x in v.data() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Additive attention over grouped encoder states.
///
/// Keys and values are time-major: row `t * G + g` holds step `t` of group
/// `g`. Query row `b` attends over group `groups[b]`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub steps: usize,
    pub groups: Arc<[usize]>,
}

pub trait Backend {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Matrix;
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::V;
    fn constant(&mut self, m: Matrix) -> Self::V;
    fn shared_constant(&mut self, m: Arc<Matrix>) -> Self::V;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Adds a 1×n row to every row of `a`.
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, k: f64) -> Self::V;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Self::V;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Self::V;
    fn slice_cols(&mut self, a: &Self::V, start: usize, end: usize) -> Self::V;
    fn slice_rows(&mut self, a: &Self::V, start: usize, end: usize) -> Self::V;
    /// Row `i` of the output is row `ids[i]` of `a`.
    fn gather_rows(&mut self, a: &Self::V, ids: &[usize]) -> Self::V;
    fn transpose(&mut self, a: &Self::V) -> Self::V;
    /// Gate pre-activations `[i f g o]` (B×4H) and cell `c` (B×H) to `[h' c']` (B×2H).
    fn lstm_cell(&mut self, gates: &Self::V, c: &Self::V) -> Self::V;
    /// Context vectors (B×P) for projected queries `q` (B×A), projected keys
    /// (T·G×A), values (T·G×P) and scoring vector `v` (A×1). Also returns the
    /// attention weights (B×T).
    fn attention(
        &mut self,
        q: &Self::V,
        keys: &Self::V,
        values: &Self::V,
        v: &Self::V,
        spec: &AttentionSpec,
    ) -> (Self::V, Matrix);
    fn log_softmax(&mut self, a: &Self::V) -> Self::V;
    /// Σ_r −weights[r] · log_softmax(logits)[r, targets[r]] as a 1×1 value.
    fn cross_entropy(&mut self, logits: &Self::V, targets: &[usize], weights: &[f64]) -> Self::V;
    /// Picks single entries of `a` into an n×1 column.
    fn pick(&mut self, a: &Self::V, at: &[(usize, usize)]) -> Self::V;
}

// ---- shared forward kernels ----

fn add_row_fwd(a: &Matrix, row: &Matrix) -> Matrix {
    assert_eq!((row.rows(), row.cols()), (1, a.cols()), "bias shape");
    let mut out = a.clone();
    for r in 0..out.rows() {
        axpy(1.0, row.data(), out.row_mut(r));
    }
    out
}

fn zip_fwd(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.shape(), b.shape(), "elementwise shape");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn concat_cols_fwd(parts: &[&Matrix]) -> Matrix {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut off = 0;
        for p in parts {
            assert_eq!(p.rows(), rows, "concat_cols rows");
            out.row_mut(r)[off..off + p.cols()].copy_from_slice(p.row(r));
            off += p.cols();
        }
    }
    out
}

fn concat_rows_fwd(parts: &[&Matrix]) -> Matrix {
    let cols = parts[0].cols();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.data().len()).sum());
    for p in parts {
        assert_eq!(p.cols(), cols, "concat_rows cols");
        data.extend_from_slice(p.data());
    }
    Matrix::from_vec(data.len() / cols.max(1), cols, data)
}

fn slice_cols_fwd(a: &Matrix, start: usize, end: usize) -> Matrix {
    assert!(start <= end && end <= a.cols(), "slice_cols range");
    let mut data = Vec::with_capacity(a.rows() * (end - start));
    for r in 0..a.rows() {
        data.extend_from_slice(&a.row(r)[start..end]);
    }
    Matrix::from_vec(a.rows(), end - start, data)
}

fn gather_rows_fwd(a: &Matrix, ids: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(ids.len() * a.cols());
    for &i in ids {
        data.extend_from_slice(a.row(i));
    }
    Matrix::from_vec(ids.len(), a.cols(), data)
}

/// Returns `[h c]` and the gate activations `[i f g o]` plus tanh(c').
fn lstm_cell_fwd(gates: &Matrix, c: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (b, h4) = gates.shape();
    let h = h4 / 4;
    assert_eq!(c.shape(), (b, h), "lstm cell shape");
    let mut acts = Matrix::zeros(b, h4);
    let mut out = Matrix::zeros(b, 2 * h);
    let mut tc = Matrix::zeros(b, h);
    for r in 0..b {
        let g = gates.row(r);
        let a = acts.row_mut(r);
        for k in 0..h {
            a[k] = sigmoid(g[k]);
            a[h + k] = sigmoid(g[h + k]);
            a[2 * h + k] = g[2 * h + k].tanh();
            a[3 * h + k] = sigmoid(g[3 * h + k]);
        }
        let a = acts.row(r);
        let cr = c.row(r);
        let o = out.row_mut(r);
        let t = tc.row_mut(r);
        for k in 0..h {
            let cn = a[h + k] * cr[k] + a[k] * a[2 * h + k];
            t[k] = cn.tanh();
            o[k] = a[3 * h + k] * t[k];
            o[h + k] = cn;
        }
    }
    (out, acts, tc)
}

struct AttnCache {
    ctx: Matrix,
    alpha: Matrix,
    /// tanh(q + k) laid out [b][t][a].
    tanhs: Vec<f64>,
}

fn attention_fwd(q: &Matrix, keys: &Matrix, values: &Matrix, v: &Matrix, spec: &AttentionSpec) -> AttnCache {
    let (b, a) = q.shape();
    let t = spec.steps;
    let g = keys.rows() / t;
    assert_eq!(keys.rows(), t * g, "keys rows");
    assert_eq!(keys.cols(), a, "keys width");
    assert_eq!(values.rows(), keys.rows(), "values rows");
    assert_eq!(v.shape(), (a, 1), "attention vector");
    assert_eq!(spec.groups.len(), b, "group per query");
    let p = values.cols();
    let mut tanhs = vec![0.0; b * t * a];
    let mut alpha = Matrix::zeros(b, t);
    let mut ctx = Matrix::zeros(b, p);
    let vd = v.data();
    for r in 0..b {
        let grp = spec.groups[r];
        let qr = q.row(r);
        let scores = alpha.row_mut(r);
        for s in 0..t {
            let kr = keys.row(s * g + grp);
            let th = &mut tanhs[(r * t + s) * a..(r * t + s + 1) * a];
            for k in 0..a {
                th[k] = (qr[k] + kr[k]).tanh();
            }
            scores[s] = dot(th, vd);
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in scores.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in scores.iter_mut() {
            *x /= z;
        }
        let cr = ctx.row_mut(r);
        for s in 0..t {
            axpy(alpha.get(r, s), values.row(s * g + grp), cr);
        }
    }
    AttnCache { ctx, alpha, tanhs }
}

fn cross_entropy_fwd(logits: &Matrix, targets: &[usize], weights: &[f64]) -> (f64, Matrix) {
    assert_eq!(targets.len(), logits.rows(), "one target per row");
    assert_eq!(weights.len(), logits.rows(), "one weight per row");
    let mut logp = logits.clone();
    log_softmax_rows(&mut logp);
    let mut loss = 0.0;
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if w != 0.0 {
            loss -= w * logp.get(r, t);
        }
    }
    (loss, logp)
}

/// Value-only backend.
#[derive(Default)]
pub struct Eval;

impl Backend for Eval {
    type V = Arc<Matrix>;

    fn value<'a>(&'a self, v: &'a Arc<Matrix>) -> &'a Matrix {
        v
    }
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Arc<Matrix> {
        store.shared(id)
    }
    fn constant(&mut self, m: Matrix) -> Arc<Matrix> {
        Arc::new(m)
    }
    fn shared_constant(&mut self, m: Arc<Matrix>) -> Arc<Matrix> {
        m
    }
    fn matmul(&mut self, a: &Arc<Matrix>, b: &Arc<Matrix>) -> Arc<Matrix> {
        Arc::new(matmul(a, b))
    }
    fn add(&mut self, a: &Arc<Matrix>, b: &Arc<Matrix>) -> Arc<Matrix> {
        Arc::new(zip_fwd(a, b, |x, y| x + y))
    }
    fn add_row(&mut self, a: &Arc<Matrix>, row: &Arc<Matrix>) -> Arc<Matrix> {
        Arc::new(add_row_fwd(a, row))
    }
    fn mul(&mut self, a: &Arc<Matrix>, b: &Arc<Matrix>) -> Arc<Matrix> {
        Arc::new(zip_fwd(a, b, |x, y| x * y))
    }
    fn tanh(&mut self, a: &Arc<Matrix>) -> Arc<Matrix> {
        Arc::new(a.map(f64::tanh))
    }
    fn sigmoid(&mut self, a: &Arc<Matrix>) -> Arc<Matrix> {
        Arc::new(a.map(sigmoid))
    }
    fn scale(&mut self, a: &Arc<Matrix>, k: f64) -> Arc<Matrix> {
        Arc::new(a.map(|x| x * k))
    }
    fn sum(&mut self, a: &Arc<Matrix>) -> Arc<Matrix> {
        Arc::new(Matrix::from_vec(1, 1, vec![a.data().iter().sum()]))
    }
    fn concat_cols(&mut self, parts: &[Arc<Matrix>]) -> Arc<Matrix> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| p.as_ref()).collect();
        Arc::new(concat_cols_fwd(&refs))
    }
    fn concat_rows(&mut self, parts: &[Arc<Matrix>]) -> Arc<Matrix> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| p.as_ref()).collect();
        Arc::new(concat_rows_fwd(&refs))
    }
    fn slice_cols(&mut self, a: &Arc<Matrix>, start: usize, end: usize) -> Arc<Matrix> {
        Arc::new(slice_cols_fwd(a, start, end))
    }
    fn slice_rows(&mut self, a: &Arc<Matrix>, start: usize, end: usize) -> Arc<Matrix> {
        Arc::new(a.slice_rows(start, end))
    }
    fn gather_rows(&mut self, a: &Arc<Matrix>, ids: &[usize]) -> Arc<Matrix> {
        Arc::new(gather_rows_fwd(a, ids))
    }
    fn transpose(&mut self, a: &Arc<Matrix>) -> Arc<Matrix> {
        Arc::new(a.transpose())
    }
    fn lstm_cell(&mut self, gates: &Arc<Matrix>, c: &Arc<Matrix>) -> Arc<Matrix> {
        Arc::new(lstm_cell_fwd(gates, c).0)
    }
    fn attention(
        &mut self,
        q: &Arc<Matrix>,
        keys: &Arc<Matrix>,
        values: &Arc<Matrix>,
        v: &Arc<Matrix>,
        spec: &AttentionSpec,
    ) -> (Arc<Matrix>, Matrix) {
        let c = attention_fwd(q, keys, values, v, spec);
        (Arc::new(c.ctx), c.alpha)
    }
    fn log_softmax(&mut self, a: &Arc<Matrix>) -> Arc<Matrix> {
        let mut m = (**a).clone();
        log_softmax_rows(&mut m);
        Arc::new(m)
    }
    fn cross_entropy(&mut self, logits: &Arc<Matrix>, targets: &[usize], weights: &[f64]) -> Arc<Matrix> {
        Arc::new(Matrix::from_vec(1, 1, vec![cross_entropy_fwd(logits, targets, weights).0]))
    }
    fn pick(&mut self, a: &Arc<Matrix>, at: &[(usize, usize)]) -> Arc<Matrix> {
        Arc::new(Matrix::from_vec(at.len(), 1, at.iter().map(|&(r, c)| a.get(r, c)).collect()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Scale(usize, f64),
    Sum(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    Transpose(usize),
    LstmCell { gates: usize, c: usize, acts: Matrix, tanh_c: Matrix },
    Attention { q: usize, keys: usize, values: usize, v: usize, spec: AttentionSpec, alpha: Matrix, tanhs: Vec<f64> },
    LogSoftmax(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, logp: Matrix },
    Pick(usize, Vec<(usize, usize)>),
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Recording backend. Parameters read through [`Backend::param`] are the
/// only leaves that receive gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

/// Gradients for every parameter read during the recorded computation.
pub struct Gradients(pub Vec<(ParamId, Matrix)>);

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Back-propagates from the 1×1 value `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.val(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let mut out: Vec<(ParamId, Matrix)> = self
            .params
            .iter()
            .map(|(&id, &n)| {
                let g = grads[n].take().unwrap_or_else(|| {
                    let (r, c) = self.nodes[n].value.shape();
                    Matrix::zeros(r, c)
                });
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        Gradients(out)
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let needs = |j: usize| self.nodes[j].needs_grad;
        let acc = |grads: &mut [Option<Matrix>], j: usize, f: &dyn Fn(&mut Matrix)| {
            let slot = grads[j].get_or_insert_with(|| {
                let (r, c) = self.nodes[j].value.shape();
                Matrix::zeros(r, c)
            });
            f(slot);
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if needs(a) {
                    acc(grads, a, &|s| matmul_bt_acc(g, &self.nodes[b].value, s));
                }
                if needs(b) {
                    acc(grads, b, &|s| matmul_at_acc(&self.nodes[a].value, g, s));
                }
            }
            &Op::Add(a, b) => {
                for j in [a, b] {
                    if needs(j) {
                        acc(grads, j, &|s| s.add_assign(g));
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if needs(a) {
                    acc(grads, a, &|s| s.add_assign(g));
                }
                if needs(row) {
                    acc(grads, row, &|s| {
                        for r in 0..g.rows() {
                            axpy(1.0, g.row(r), s.data_mut());
                        }
                    });
                }
            }
            &Op::Mul(a, b) => {
                for (j, k) in [(a, b), (b, a)] {
                    if needs(j) {
                        let other = &self.nodes[k].value;
                        acc(grads, j, &|s| {
                            for ((x, &gg), &o) in s.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
                                *x += gg * o;
                            }
                        });
                    }
                }
            }
            &Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                acc(grads, a, &|s| {
                    for ((x, &gg), &yy) in s.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *x += gg * (1.0 - yy * yy);
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                acc(grads, a, &|s| {
                    for ((x, &gg), &yy) in s.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *x += gg * yy * (1.0 - yy);
                    }
                });
            }
            &Op::Scale(a, k) => acc(grads, a, &|s| axpy(k, g.data(), s.data_mut())),
            &Op::Sum(a) => {
                let gg = g.get(0, 0);
                acc(grads, a, &|s| s.data_mut().iter_mut().for_each(|x| *x += gg));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if needs(p) {
                        acc(grads, p, &|s| {
                            for r in 0..g.rows() {
                                axpy(1.0, &g.row(r)[off..off + w], s.row_mut(r));
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.nodes[p].value.rows();
                    if needs(p) {
                        let cols = g.cols();
                        acc(grads, p, &|s| axpy(1.0, &g.data()[off * cols..(off + h) * cols], s.data_mut()));
                    }
                    off += h;
                }
            }
            &Op::SliceCols(a, start) => acc(grads, a, &|s| {
                for r in 0..g.rows() {
                    axpy(1.0, g.row(r), &mut s.row_mut(r)[start..start + g.cols()]);
                }
            }),
            &Op::SliceRows(a, start) => {
                let cols = g.cols();
                acc(grads, a, &|s| axpy(1.0, g.data(), &mut s.data_mut()[start * cols..(start + g.rows()) * cols]));
            }
            Op::GatherRows(a, ids) => acc(grads, *a, &|s| {
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, g.row(r), s.row_mut(id));
                }
            }),
            &Op::Transpose(a) => acc(grads, a, &|s| s.add_assign(&g.transpose())),
            Op::LstmCell { gates, c, acts, tanh_c } => {
                let (b, h2) = g.shape();
                let h = h2 / 2;
                let cprev = &self.nodes[*c].value;
                let mut dgates = Matrix::zeros(b, 4 * h);
                let mut dc = Matrix::zeros(b, h);
                for r in 0..b {
                    let a = acts.row(r);
                    let gr = g.row(r);
                    let tc = tanh_c.row(r);
                    let cp = cprev.row(r);
                    let dg = dgates.row_mut(r);
                    let mut dcr = vec![0.0; h];
                    for k in 0..h {
                        let (ig, fg, gg, og) = (a[k], a[h + k], a[2 * h + k], a[3 * h + k]);
                        let dh = gr[k];
                        let dcn = gr[h + k] + dh * og * (1.0 - tc[k] * tc[k]);
                        dg[k] = dcn * gg * ig * (1.0 - ig);
                        dg[h + k] = dcn * cp[k] * fg * (1.0 - fg);
                        dg[2 * h + k] = dcn * ig * (1.0 - gg * gg);
                        dg[3 * h + k] = dh * tc[k] * og * (1.0 - og);
                        dcr[k] = dcn * fg;
                    }
                    dc.row_mut(r).copy_from_slice(&dcr);
                }
                if needs(*gates) {
                    acc(grads, *gates, &|s| s.add_assign(&dgates));
                }
                if needs(*c) {
                    acc(grads, *c, &|s| s.add_assign(&dc));
                }
            }
            Op::Attention { q, keys, values, v, spec, alpha, tanhs } => {
                self.attention_backward(g, (*q, *keys, *values, *v), spec, alpha, tanhs, grads);
            }
            &Op::LogSoftmax(a) => {
                let y = &self.nodes[i].value;
                acc(grads, a, &|s| {
                    for r in 0..g.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        let sr = s.row_mut(r);
                        for ((x, &gg), &yy) in sr.iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *x += gg - yy.exp() * gs;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, logp } => {
                let gg = g.get(0, 0);
                acc(grads, *logits, &|s| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let sr = s.row_mut(r);
                        for (x, &lp) in sr.iter_mut().zip(logp.row(r)) {
                            *x += gg * w * lp.exp();
                        }
                        sr[t] -= gg * w;
                    }
                });
            }
            Op::Pick(a, at) => acc(grads, *a, &|s| {
                for (k, &(r, c)) in at.iter().enumerate() {
                    let cols = s.cols();
                    s.data_mut()[r * cols + c] += g.get(k, 0);
                }
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Matrix,
        (q, keys, values, v): (usize, usize, usize, usize),
        spec: &AttentionSpec,
        alpha: &Matrix,
        tanhs: &[f64],
        grads: &mut [Option<Matrix>],
    ) {
        let vals = &self.nodes[values].value;
        let vv = self.nodes[v].value.data();
        let kdim = self.nodes[keys].value.shape();
        let (b, a) = self.nodes[q].value.shape();
        let t = spec.steps;
        let ng = kdim.0 / t;
        let mut dq = Matrix::zeros(b, a);
        let mut dk = Matrix::zeros(kdim.0, kdim.1);
        let mut dvals = Matrix::zeros(vals.rows(), vals.cols());
        let mut dv = vec![0.0; a];
        let mut dalpha = vec![0.0; t];
        for r in 0..b {
            let grp = spec.groups[r];
            let gr = g.row(r);
            let al = alpha.row(r);
            for s in 0..t {
                let row = s * ng + grp;
                dalpha[s] = dot(gr, vals.row(row));
                axpy(al[s], gr, dvals.row_mut(row));
            }
            let mean: f64 = (0..t).map(|s| al[s] * dalpha[s]).sum();
            for s in 0..t {
                let ds = al[s] * (dalpha[s] - mean);
                if ds == 0.0 {
                    continue;
                }
                let th = &tanhs[(r * t + s) * a..(r * t + s + 1) * a];
                let row = s * ng + grp;
                let dqr = dq.row_mut(r);
                for k in 0..a {
                    let dz = ds * vv[k] * (1.0 - th[k] * th[k]);
                    dqr[k] += dz;
                    dv[k] += ds * th[k];
                }
                let dkr = dk.row_mut(row);
                for k in 0..a {
                    dkr[k] += ds * vv[k] * (1.0 - th[k] * th[k]);
                }
            }
        }
        let mut put = |j: usize, m: &Matrix| {
            if self.nodes[j].needs_grad {
                match &mut grads[j] {
                    Some(s) => s.add_assign(m),
                    slot => *slot = Some(m.clone()),
                }
            }
        };
        put(q, &dq);
        put(keys, &dk);
        put(values, &dvals);
        put(v, &Matrix::from_vec(a, 1, dv));
    }
}

impl Backend for Tape {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Matrix {
        self.val(*v)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&n) = self.params.get(&id) {
            return Var(n);
        }
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let n = self.nodes.len() - 1;
        self.params.insert(id, n);
        Var(n)
    }

    fn constant(&mut self, m: Matrix) -> Var {
        self.shared_constant(Arc::new(m))
    }

    fn shared_constant(&mut self, m: Arc<Matrix>) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = matmul(self.val(*a), self.val(*b));
        self.push(v, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = zip_fwd(self.val(*a), self.val(*b), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }
    fn add_row(&mut self, a: &Var, row: &Var) -> Var {
        let v = add_row_fwd(self.val(*a), self.val(*row));
        self.push(v, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let v = zip_fwd(self.val(*a), self.val(*b), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }
    fn tanh(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(f64::tanh);
        self.push(v, Op::Tanh(a.0), &[a.0])
    }
    fn sigmoid(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(sigmoid);
        self.push(v, Op::Sigmoid(a.0), &[a.0])
    }
    fn scale(&mut self, a: &Var, k: f64) -> Var {
        let v = self.val(*a).map(|x| x * k);
        self.push(v, Op::Scale(a.0, k), &[a.0])
    }
    fn sum(&mut self, a: &Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.val(*a).data().iter().sum()]);
        self.push(v, Op::Sum(a.0), &[a.0])
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let v = concat_cols_fwd(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>());
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(v, Op::ConcatCols(ids.clone()), &ids)
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let v = concat_rows_fwd(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>());
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(v, Op::ConcatRows(ids.clone()), &ids)
    }
    fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Var {
        let v = slice_cols_fwd(self.val(*a), start, end);
        self.push(v, Op::SliceCols(a.0, start), &[a.0])
    }
    fn slice_rows(&mut self, a: &Var, start: usize, end: usize) -> Var {
        let v = self.val(*a).slice_rows(start, end);
        self.push(v, Op::SliceRows(a.0, start), &[a.0])
    }
    fn gather_rows(&mut self, a: &Var, ids: &[usize]) -> Var {
        let v = gather_rows_fwd(self.val(*a), ids);
        self.push(v, Op::GatherRows(a.0, ids.to_vec()), &[a.0])
    }
    fn transpose(&mut self, a: &Var) -> Var {
        let v = self.val(*a).transpose();
        self.push(v, Op::Transpose(a.0), &[a.0])
    }
    fn lstm_cell(&mut self, gates: &Var, c: &Var) -> Var {
        let (out, acts, tanh_c) = lstm_cell_fwd(self.val(*gates), self.val(*c));
        let op = Op::LstmCell {
            gates: gates.0,
            c: c.0,
            acts,
            tanh_c,
        };
        self.push(out, op, &[gates.0, c.0])
    }
    fn attention(&mut self, q: &Var, keys: &Var, values: &Var, v: &Var, spec: &AttentionSpec) -> (Var, Matrix) {
        let cache = attention_fwd(self.val(*q), self.val(*keys), self.val(*values), self.val(*v), spec);
        let alpha = cache.alpha.clone();
        let op = Op::Attention {
            q: q.0,
            keys: keys.0,
            values: values.0,
            v: v.0,
            spec: spec.clone(),
            alpha: cache.alpha,
            tanhs: cache.tanhs,
        };
        (self.push(cache.ctx, op, &[q.0, keys.0, values.0, v.0]), alpha)
    }
    fn log_softmax(&mut self, a: &Var) -> Var {
        let mut m = self.val(*a).clone();
        log_softmax_rows(&mut m);
        self.push(m, Op::LogSoftmax(a.0), &[a.0])
    }
    fn cross_entropy(&mut self, logits: &Var, targets: &[usize], weights: &[f64]) -> Var {
        let (loss, logp) = cross_entropy_fwd(self.val(*logits), targets, weights);
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            logp,
        };
        self.push(Matrix::from_vec(1, 1, vec![loss]), op, &[logits.0])
    }
    fn pick(&mut self, a: &Var, at: &[(usize, usize)]) -> Var {
        let m = self.val(*a);
        let v = Matrix::from_vec(at.len(), 1, at.iter().map(|&(r, c)| m.get(r, c)).collect());
        self.push(v, Op::Pick(a.0, at.to_vec()), &[a.0])
    }
}
