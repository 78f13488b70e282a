//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from their [`ParamStore`] rather than copied, so a graph lives no
//! longer than the stores it reads. [`Graph::backward`] walks the record in
//! reverse and returns gradients keyed by store.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors of one model.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

// A clone is a distinct store: gradients of the two must never be merged.
impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Gradient tensors aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store.values.iter().map(|v| Matrix::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn from_tensors(grads: Vec<Matrix>) -> Self {
        Gradients { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.grads
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Gelu(Var),
    Softmax { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    MeanRows(Var),
    SumCols(Var),
    SumAll(Var),
    MeanAll(Var),
    Relu(Var),
    Abs(Var),
    LogSigmoid(Var),
    LogSoftmaxPick { logits: Var, picks: Vec<(usize, usize)>, probs: Vec<Vec<f64>> },
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
}

/// One recorded forward computation.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<(u64, ParamId), Var>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a {:?} tensor", m.dim());
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A constant input; it receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let key = (store.uid, id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param { store: store.uid, id },
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBt(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "add_row: bias shape");
        let out = self.value(x) + self.value(row);
        self.push(out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x) * factor;
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) + c;
        self.push(out, Op::AddScalar(x))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Row-wise layer normalisation with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.dim();
        let mut xhat = Matrix::zeros((n, c));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::abs);
        self.push(out, Op::Abs(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(log_sigmoid);
        self.push(out, Op::LogSigmoid(x))
    }

    /// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`
    /// and the remaining entries are exactly zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.dim();
        let mut out = Matrix::zeros((n, c));
        for i in 0..n {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = xv.slice(s![i, ..width]);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for j in 0..width {
                let e = (row[j] - max).exp();
                out[[i, j]] = e;
                sum += e;
            }
            for j in 0..width {
                out[[i, j]] /= sum;
            }
        }
        self.push(out, Op::Softmax { x })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let out = self.value(x).select(Axis(0), rows);
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// `n×c → 1×c`
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.sum_axis(Axis(0)).insert_axis(Axis(0)) / v.nrows() as f64;
        self.push(out, Op::MeanRows(x))
    }

    /// `n×c → n×1`
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(x).sum());
        self.push(out, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Matrix::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(out, Op::MeanAll(x))
    }

    /// Log-softmax of `logits[row]` evaluated at `target`, for each pick.
    /// Returns a `picks×1` column.
    pub fn log_softmax_pick(&mut self, logits: Var, picks: &[(usize, usize)]) -> Var {
        let lv = self.value(logits);
        let mut out = Matrix::zeros((picks.len(), 1));
        let mut probs = Vec::with_capacity(picks.len());
        for (k, &(r, t)) in picks.iter().enumerate() {
            let (p, lse) = softmax_row(lv.row(r).iter().copied());
            out[[k, 0]] = lv[[r, t]] - lse;
            probs.push(p);
        }
        self.push(
            out,
            Op::LogSoftmaxPick {
                logits,
                picks: picks.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Shape(format!("backward from a {:?} tensor", lv.dim())));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv[[0, 0]])));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        let mut out = Backward::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param { store, id } => {
                    out.by_store.entry(*store).or_default().push((*id, g));
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(x, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *x, g);
                }
                Op::Scale(x, f) => acc(&mut grads, *x, g * *f),
                Op::AddScalar(x) => acc(&mut grads, *x, g),
                Op::Gather { table, ids } => {
                    let mut dt = Matrix::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = dt.row_mut(id);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let dgain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * self.value(*gain);
                    let c = xhat.ncols() as f64;
                    let mut dx = Matrix::zeros(xhat.raw_dim());
                    for i in 0..xhat.nrows() {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = (&dh * &xh).sum();
                        for j in 0..xhat.ncols() {
                            dx[[i, j]] =
                                inv_std[i] / c * (c * dh[j] - sum_dh - xh[j] * sum_dh_xh);
                        }
                    }
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                    acc(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(|v| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
                    });
                    dx *= &g;
                    acc(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let mut dx = self.value(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    dx *= &g;
                    acc(&mut grads, *x, dx);
                }
                Op::Abs(x) => {
                    let mut dx = self.value(*x).mapv(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    dx *= &g;
                    acc(&mut grads, *x, dx);
                }
                Op::LogSigmoid(x) => {
                    let mut dx = self.value(*x).mapv(|v| sigmoid(-v));
                    dx *= &g;
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot = (&yr * &gr).sum();
                        for j in 0..y.ncols() {
                            dx[[i, j]] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Matrix::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let mut dx = Matrix::zeros(self.value(*x).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::MeanRows(x) => {
                    let (n, c) = self.shape(*x);
                    let dx = g.broadcast((n, c)).unwrap().to_owned() / n as f64;
                    acc(&mut grads, *x, dx);
                }
                Op::SumCols(x) => {
                    let (n, c) = self.shape(*x);
                    let dx = g.broadcast((n, c)).unwrap().to_owned();
                    acc(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let dx = Matrix::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *x, dx);
                }
                Op::MeanAll(x) => {
                    let v = self.value(*x);
                    let dx = Matrix::from_elem(v.raw_dim(), g[[0, 0]] / v.len() as f64);
                    acc(&mut grads, *x, dx);
                }
                Op::LogSoftmaxPick {
                    logits,
                    picks,
                    probs,
                } => {
                    let mut dl = Matrix::zeros(self.value(*logits).raw_dim());
                    for (k, (&(r, t), p)) in picks.iter().zip(probs).enumerate() {
                        let gk = g[[k, 0]];
                        if gk == 0.0 {
                            continue;
                        }
                        for (j, pj) in p.iter().enumerate() {
                            dl[[r, j]] -= gk * pj;
                        }
                        dl[[r, t]] += gk;
                    }
                    acc(&mut grads, *logits, dl);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Default)]
pub struct Backward {
    by_store: HashMap<u64, Vec<(ParamId, Matrix)>>,
}

impl Backward {
    /// Gradients for `store`; parameters the graph never touched get zeros.
    pub fn gradients(&self, store: &ParamStore) -> Gradients {
        let mut g = Gradients::zeros_like(store);
        if let Some(entries) = self.by_store.get(&store.uid) {
            for (id, m) in entries {
                g.grads[id.0] += m;
            }
        }
        g
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Softmax probabilities and log-sum-exp of a row.
pub fn softmax_row(row: impl Iterator<Item = f64> + Clone) -> (Vec<f64>, f64) {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (exps.into_iter().map(|e| e / sum).collect(), lse)
}

/// Log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let (_, lse) = softmax_row(row.iter().copied());
    row.iter().map(|v| v - lse).collect()
}
