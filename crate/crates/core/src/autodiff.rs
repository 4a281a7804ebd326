//! Dense 2-D tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Tape`] records operations for a single forward pass. Parameters live
//! in a [`ParamStore`] that the tape borrows; [`Tape::backward`] returns the
//! parameter gradients without touching the store, so several tapes can be
//! evaluated in parallel and their gradients summed in a fixed order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dot product over four independent lanes, so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} tensor", data.len())));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::row_vector(vec![v])
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    fn t_matmul(&self, other: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.data[i * other.cols..(i + 1) * other.cols].iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ` without materializing the transpose.
    fn matmul_t(&self, other: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        out
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named parameter tensors plus gradient accumulators.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    grads: Vec<Option<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Replaces a value, possibly with a different shape; drops its gradient.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
        if let Some(g) = self.grads.get_mut(id.0) {
            *g = None;
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Accumulated gradient, if any was added since the last [`zero_grads`](Self::zero_grads).
    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Adds `scale * grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        self.grads.resize(self.params.len(), None);
        for (i, buf) in grads.bufs.iter().enumerate() {
            let Some(buf) = buf else { continue };
            let value = &self.params[i].value;
            let acc = self.grads[i].get_or_insert_with(|| Tensor::zeros(value.rows, value.cols));
            match buf {
                GradBuf::Dense(t) => {
                    for (a, g) in acc.data.iter_mut().zip(&t.data) {
                        *a += scale * g;
                    }
                }
                GradBuf::Rows(rows) => {
                    for (&r, g) in rows {
                        for (a, g) in acc.row_mut(r).iter_mut().zip(g) {
                            *a += scale * g;
                        }
                    }
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Debug)]
enum GradBuf {
    Dense(Tensor),
    /// Row-sparse gradient from embedding lookups.
    Rows(BTreeMap<usize, Vec<f64>>),
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    bufs: Vec<Option<GradBuf>>,
}

impl Gradients {
    /// Dense copy of the gradient for `id`, or `None` if it received none.
    pub fn get(&self, id: ParamId, shape: (usize, usize)) -> Option<Tensor> {
        match self.bufs.get(id.0)?.as_ref()? {
            GradBuf::Dense(t) => Some(t.clone()),
            GradBuf::Rows(rows) => {
                let mut t = Tensor::zeros(shape.0, shape.1);
                for (&r, g) in rows {
                    for (a, g) in t.row_mut(r).iter_mut().zip(g) {
                        *a += g;
                    }
                }
                Some(t)
            }
        }
    }

    fn slot(&mut self, id: ParamId) -> &mut Option<GradBuf> {
        if self.bufs.len() <= id.0 {
            self.bufs.resize(id.0 + 1, None);
        }
        &mut self.bufs[id.0]
    }

    fn add_dense(&mut self, id: ParamId, g: &Tensor) {
        let slot = self.slot(id);
        match slot {
            None => *slot = Some(GradBuf::Dense(g.clone())),
            Some(GradBuf::Dense(t)) => t.add_assign(g),
            Some(GradBuf::Rows(rows)) => {
                let mut t = g.clone();
                for (&r, v) in rows.iter() {
                    for (a, v) in t.row_mut(r).iter_mut().zip(v) {
                        *a += v;
                    }
                }
                *slot = Some(GradBuf::Dense(t));
            }
        }
    }

    fn add_rows(&mut self, id: ParamId, idx: &[usize], g: &Tensor) {
        let slot = self.slot(id);
        match slot {
            Some(GradBuf::Dense(t)) => {
                for (i, &r) in idx.iter().enumerate() {
                    for (a, v) in t.row_mut(r).iter_mut().zip(g.row(i)) {
                        *a += v;
                    }
                }
            }
            _ => {
                if slot.is_none() {
                    *slot = Some(GradBuf::Rows(BTreeMap::new()));
                }
                let Some(GradBuf::Rows(rows)) = slot else { unreachable!() };
                for (i, &r) in idx.iter().enumerate() {
                    let acc = rows.entry(r).or_insert_with(|| vec![0.0; g.cols]);
                    for (a, v) in acc.iter_mut().zip(g.row(i)) {
                        *a += v;
                    }
                }
            }
        }
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, Axis),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    MaxOverTime(Var, Vec<usize>),
    Softmax(Var),
    CrossEntropy(Var, Tensor),
    Dropout(Var, Vec<f64>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    Transpose(Var),
    Sum(Var),
    SqNorm(Var),
    Im2Col(Var, usize),
}

struct Node {
    op: Op,
    /// `None` for parameters, whose values live in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Probabilities below this are clamped inside the cross-entropy log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Records one forward computation.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
    consumed: bool,
}

impl<'a> Tape<'a> {
    /// `training` enables dropout; `seed` fixes its masks.
    pub fn new(store: &'a ParamStore, training: bool, seed: u64) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            consumed: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(t),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = self.store.is_trainable(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    /// Adds a `1×c` row to every row of an `n×c` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(Error::Shape(format!("add_row: {:?} plus row {:?}", ta.shape(), tr.shape())));
        }
        let mut v = ta.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&tr.data) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddRow(a, row), v, &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let first = self.value(parts[0]).shape();
        let v = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols != first.1 {
                        return Err(Error::Shape(format!("row concat: {} vs {} columns", t.cols, first.1)));
                    }
                    rows += t.rows;
                    data.extend_from_slice(&t.data);
                }
                Tensor::from_vec(rows, first.1, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows != first.0 {
                        return Err(Error::Shape(format!("column concat: {} vs {} rows", t.rows, first.0)));
                    }
                    cols += t.cols;
                }
                let mut data = Vec::with_capacity(first.0 * cols);
                for r in 0..first.0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::from_vec(first.0, cols, data)?
            }
        };
        Ok(self.push(Op::Concat(parts.to_vec(), axis), v, parts))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v, &[a])
    }

    /// Column-wise maximum over rows, giving a `1×c` row.
    pub fn max_over_time(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows == 0 {
            return Err(Error::Shape("max over an empty sequence".into()));
        }
        let mut arg = vec![0; t.cols];
        let mut out = t.row(0).to_vec();
        for r in 1..t.rows {
            for (c, &x) in t.row(r).iter().enumerate() {
                if x > out[c] {
                    out[c] = x;
                    arg[c] = r;
                }
            }
        }
        Ok(self.push(Op::MaxOverTime(a, arg), Tensor::row_vector(out), &[a]))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.push(Op::Softmax(a), v, &[a])
    }

    /// Mean over rows of `-sum_k target_k ln(max(p_k, PROB_FLOOR))`.
    pub fn cross_entropy(&mut self, probs: Var, target: Tensor) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != target.shape() {
            return Err(Error::Shape(format!("cross entropy: {:?} vs target {:?}", p.shape(), target.shape())));
        }
        let loss = -p
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| if t == 0.0 { 0.0 } else { t * p.max(PROB_FLOOR).ln() })
            .sum::<f64>()
            / p.rows as f64;
        Ok(self.push(Op::CrossEntropy(probs, target), Tensor::scalar(loss), &[probs]))
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when the tape is not training.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let t = self.value(a);
        let v = Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        Ok(self.push(Op::Dropout(a, mask), v, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols {
            return Err(Error::Shape(format!("columns {start}..{} of {}", start + len, t.cols)));
        }
        let mut data = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let v = Tensor::from_vec(t.rows, len, data)?;
        Ok(self.push(Op::SliceCols(a, start), v, &[a]))
    }

    /// Rows `idx` of `a`, in order (repeats allowed). Embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows) {
            return Err(Error::Shape(format!("row {bad} of {}", t.rows)));
        }
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_vec(idx.len(), t.cols, data)?;
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), v, &[a]))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.gather_rows(a, &[r])
    }

    /// Stacks `n` copies of a `1×c` row.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows != 1 {
            return Err(Error::Shape(format!("repeat_rows needs one row, got {}", t.rows)));
        }
        let data = t.data.repeat(n);
        let v = Tensor::from_vec(n, t.cols, data)?;
        Ok(self.push(Op::RepeatRows(a), v, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v, &[a])
    }

    /// Sum of squared entries.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sq_norm());
        self.push(Op::SqNorm(a), v, &[a])
    }

    /// Sliding windows of `width` consecutive rows, each flattened into one
    /// row: `n×d` becomes `(n-width+1)×(width·d)`.
    pub fn im2col(&mut self, a: Var, width: usize) -> Result<Var> {
        let t = self.value(a);
        if width == 0 || t.rows < width {
            return Err(Error::Shape(format!("window {width} over {} rows", t.rows)));
        }
        let out_rows = t.rows - width + 1;
        let data = t.data[..].windows(width * t.cols).step_by(t.cols).take(out_rows).flatten().copied().collect();
        let v = Tensor::from_vec(out_rows, width * t.cols, data)?;
        Ok(self.push(Op::Im2Col(a, width), v, &[a]))
    }

    /// Reverse pass from a `1×1` loss. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Validation("backward already ran on this tape".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape(format!("loss must be 1x1, got {:?}", self.value(loss).shape())));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            let send = |grads: &mut Vec<Option<Tensor>>, to: Var, delta: Tensor| {
                if !self.nodes[to.0].requires_grad {
                    return;
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.add_dense(*id, &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        send(&mut grads, *a, g.matmul_t(tb));
                    }
                    if self.nodes[b.0].requires_grad {
                        send(&mut grads, *b, ta.t_matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut colsum = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, v) in colsum.data.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    send(&mut grads, *a, g);
                    send(&mut grads, *row, colsum);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = g.zip_map(tb, |g, y| g * y);
                    let db = g.zip_map(ta, |g, x| g * x);
                    send(&mut grads, *a, da);
                    send(&mut grads, *b, db);
                }
                Op::Scale(a, s) => send(&mut grads, *a, g.map(|x| x * s)),
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = self.value(p).shape();
                        let piece = match axis {
                            Axis::Rows => {
                                let d = g.data[offset * g.cols..(offset + pr) * g.cols].to_vec();
                                offset += pr;
                                Tensor { rows: pr, cols: pc, data: d }
                            }
                            Axis::Cols => {
                                let mut d = Vec::with_capacity(pr * pc);
                                for r in 0..pr {
                                    d.extend_from_slice(&g.row(r)[offset..offset + pc]);
                                }
                                offset += pc;
                                Tensor { rows: pr, cols: pc, data: d }
                            }
                        };
                        send(&mut grads, p, piece);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("op value");
                    send(&mut grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y)));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("op value");
                    send(&mut grads, *a, g.zip_map(y, |g, y| g * y * (1.0 - y)));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    send(&mut grads, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::MaxOverTime(a, arg) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for (col, &row) in arg.iter().enumerate() {
                        d.set(row, col, g.data[col]);
                    }
                    send(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("op value");
                    let mut d = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for (o, (y, g)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = y * (g - dot);
                        }
                    }
                    send(&mut grads, *a, d);
                }
                Op::CrossEntropy(p, target) => {
                    let probs = self.value(*p);
                    let k = g.item() / probs.rows as f64;
                    let d = probs.zip_map(target, |p, t| {
                        if t == 0.0 || p < PROB_FLOOR {
                            0.0
                        } else {
                            -k * t / p
                        }
                    });
                    send(&mut grads, *p, d);
                }
                Op::Dropout(a, mask) => {
                    let d = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(mask).map(|(g, m)| g * m).collect(),
                    };
                    send(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        d.row_mut(row)[*start..*start + g.cols].copy_from_slice(g.row(row));
                    }
                    send(&mut grads, *a, d);
                }
                Op::GatherRows(a, idx) => {
                    if let Op::Param(id) = self.nodes[a.0].op {
                        if self.nodes[a.0].requires_grad {
                            out.add_rows(id, idx, &g);
                        }
                    } else {
                        let (r, c) = self.value(*a).shape();
                        let mut d = Tensor::zeros(r, c);
                        for (i, &src) in idx.iter().enumerate() {
                            for (o, v) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        send(&mut grads, *a, d);
                    }
                }
                Op::RepeatRows(a) => {
                    let mut d = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, v) in d.data.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    send(&mut grads, *a, d);
                }
                Op::Transpose(a) => send(&mut grads, *a, g.transpose()),
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    send(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::SqNorm(a) => {
                    let k = 2.0 * g.item();
                    send(&mut grads, *a, self.value(*a).map(|x| k * x));
                }
                Op::Im2Col(a, width) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for out_row in 0..g.rows {
                        let src = g.row(out_row);
                        for w in 0..*width {
                            for (o, v) in d.row_mut(out_row + w).iter_mut().zip(&src[w * c..(w + 1) * c]) {
                                *o += v;
                            }
                        }
                    }
                    send(&mut grads, *a, d);
                }
            }
        }
        Ok(out)
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

/// Worst disagreement between analytic and numeric gradients for one parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub worst_rel_error: f64,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.worst_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.worst_rel_error.total_cmp(&b.worst_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter; smaller tensors are checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            max_coords: 200,
            seed: 7,
        }
    }
}

/// Compares backprop gradients of every trainable parameter against central
/// differences. `build` must construct the same deterministic loss each call.
pub fn grad_check<F>(store: &mut ParamStore, opts: GradCheckOptions, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store, true, opts.seed);
        let loss = build(&mut tape)?;
        Ok(tape.value(loss).item())
    };
    let grads = {
        let mut tape = Tape::new(store, true, opts.seed);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { params: Vec::new() };
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let shape = store.value(id).shape();
        let analytic = grads.get(id, shape).unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
        let n = shape.0 * shape.1;
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, opts.max_coords).into_vec()
        };
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            checked: coords.len(),
            worst_rel_error: 0.0,
            worst_index: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
        };
        for (j, k) in coords.into_iter().enumerate() {
            let orig = store.value(id).data[k];
            store.value_mut(id).data[k] = orig + opts.epsilon;
            let plus = eval(store)?;
            store.value_mut(id).data[k] = orig - opts.epsilon;
            let minus = eval(store)?;
            store.value_mut(id).data[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic.data[k];
            let err = relative_error(a, numeric);
            if j == 0 || err > check.worst_rel_error {
                check.worst_rel_error = err;
                check.worst_index = (k / shape.1, k % shape.1);
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

type PrimitiveGraph = fn(&mut Tape<'_>, &[Var]) -> Result<Var>;

fn primitives() -> Vec<(&'static str, Vec<(usize, usize)>, PrimitiveGraph)> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], |t, v| t.matmul(v[0], v[1])),
        ("add", vec![(2, 3), (2, 3)], |t, v| t.add(v[0], v[1])),
        ("add_row", vec![(4, 3), (1, 3)], |t, v| t.add_row(v[0], v[1])),
        ("mul", vec![(3, 3), (3, 3)], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![(2, 5)], |t, v| Ok(t.scale(v[0], -2.5))),
        ("concat_rows", vec![(2, 3), (1, 3)], |t, v| t.concat(v, Axis::Rows)),
        ("concat_cols", vec![(2, 1), (2, 4)], |t, v| t.concat(v, Axis::Cols)),
        ("tanh", vec![(3, 4)], |t, v| Ok(t.tanh(v[0]))),
        ("sigmoid", vec![(3, 4)], |t, v| Ok(t.sigmoid(v[0]))),
        ("relu", vec![(4, 4)], |t, v| Ok(t.relu(v[0]))),
        ("max_over_time", vec![(5, 3)], |t, v| t.max_over_time(v[0])),
        ("softmax", vec![(2, 4)], |t, v| Ok(t.softmax(v[0]))),
        ("dropout", vec![(4, 5)], |t, v| t.dropout(v[0], 0.4)),
        ("slice_cols", vec![(3, 6)], |t, v| t.slice_cols(v[0], 2, 3)),
        ("gather_rows", vec![(4, 3)], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3])),
        ("row", vec![(4, 3)], |t, v| t.row(v[0], 1)),
        ("repeat_rows", vec![(1, 3)], |t, v| t.repeat_rows(v[0], 4)),
        ("transpose", vec![(2, 5)], |t, v| Ok(t.transpose(v[0]))),
        ("sum", vec![(3, 2)], |t, v| Ok(t.sum(v[0]))),
        ("sq_norm", vec![(3, 2)], |t, v| Ok(t.sq_norm(v[0]))),
        ("im2col", vec![(6, 2)], |t, v| t.im2col(v[0], 3)),
        ("cross_entropy", vec![(1, 3)], |t, v| {
            let p = t.softmax(v[0]);
            let mut target = Tensor::zeros(1, 3);
            target.set(0, 1, 1.0);
            t.cross_entropy(p, target)
        }),
    ]
}

/// Gradient check of every tape primitive; returns `(op, max relative error)`.
///
/// Each op's output is reduced to a scalar through a fixed non-uniform weighting
/// so that every output coordinate contributes a distinct gradient.
pub fn primitive_grad_checks(opts: GradCheckOptions) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for (name, shapes, op) in primitives() {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.add(format!("{name}.{i}"), Tensor::uniform(r, c, 1.0, &mut rng), true))
            .collect();
        let report = grad_check(&mut store, opts, |tape: &mut Tape<'_>| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
            let y = op(tape, &vars)?;
            let (r, c) = tape.value(y).shape();
            let w = Tensor::from_vec(r, c, (0..r * c).map(|k| (k as f64 * 0.7 + 0.3).sin()).collect())?;
            let w = tape.constant(w);
            let weighted = tape.mul(y, w)?;
            Ok(tape.sum(weighted))
        })?;
        out.push((name, report.max_rel_error()));
    }
    Ok(out)
}

/// Adam over the trainable parameters of a store.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        let grads = std::mem::take(&mut store.grads);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.params[i].trainable {
                continue;
            }
            if self.m[i].as_ref().is_some_and(|m| m.shape() != g.shape()) {
                self.m[i] = None;
                self.v[i] = None;
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let w = &mut store.params[i].value;
            for (((w, g), m), v) in w.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}
