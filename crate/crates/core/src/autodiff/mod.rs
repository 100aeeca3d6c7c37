//! Define-by-run reverse-mode differentiation over [`Tensor2D`] values.
//!
//! Every operation appends a node holding its value to a [`Tape`]; parents
//! always precede children, so a single reverse sweep propagates gradients.
//! Parameters enter the tape through [`Tape::param`] and receive their
//! gradients in [`Tape::backward`].

mod adam;
mod params;

use std::collections::HashMap;
use std::rc::Rc;

pub use adam::Adam;
pub use params::{ParamId, ParamStore, Parameter};

use crate::error::{LavoError, Result};
use crate::tensor::{softmax_rows, Mask, Tensor2D};

/// Node handle on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    RowScale(Var, Var),
    Softmax(Var),
    Gather { src: Var, index: Rc<Vec<Option<usize>>> },
    GatherRows { src: Var, ids: Vec<usize> },
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumRows(Var),
    CumSumRows(Var),
    Sum(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor2D, inv_std: Vec<f64> },
    Gelu(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor2D },
}

#[derive(Debug)]
struct Node {
    value: Tensor2D,
    op: Op,
}

/// Recorded computation. Single-owner; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Per-node gradients from one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2D> {
        self.grads[v.0].as_ref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise layer normalisation; returns the normalised rows and `1/sigma`.
pub fn normalize_rows(x: &Tensor2D, eps: f64) -> (Tensor2D, Vec<f64>) {
    let cols = x.cols() as f64;
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / cols;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols;
        let inv_std = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
        inv.push(inv_std);
    }
    (xhat, inv)
}

/// Mean next-token cross entropy with log-sum-exp stabilisation, plus the
/// softmax probabilities.
pub fn cross_entropy_rows(logits: &Tensor2D, targets: &[usize]) -> Result<(f64, Tensor2D)> {
    if targets.len() != logits.rows() {
        return Err(LavoError::Shape { op: "cross_entropy_rows", left: logits.shape(), right: (targets.len(), 1) });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(LavoError::Contract(format!("target id {bad} outside vocabulary of {}", logits.cols())));
    }
    let probs = softmax_rows(logits, None, None)?;
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok((total / targets.len().max(1) as f64, probs))
}

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

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient sink outside the tape.
    pub fn constant(&mut self, value: Tensor2D) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    /// Stop-gradient copy.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(LavoError::Shape { op: "add_row", left: x.shape(), right: r.shape() });
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            value.row_mut(i).iter_mut().zip(r.data()).for_each(|(v, b)| *v += b);
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Row `i` of `b` scaled by `h[i]` for a column `h`.
    pub fn row_scale(&mut self, b: Var, h: Var) -> Result<Var> {
        let value = self.value(b).row_scale(self.value(h))?;
        Ok(self.push(value, Op::RowScale(b, h)))
    }

    /// Row softmax; masked entries are exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let value = softmax_rows(self.value(x), None, mask)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// `rows x cols` matrix whose entry `k` is `src.data[index[k]]`, or zero
    /// where the index is `None`.
    pub fn gather(&mut self, src: Var, index: Rc<Vec<Option<usize>>>, rows: usize, cols: usize) -> Result<Var> {
        let s = self.value(src);
        if index.len() != rows * cols {
            return Err(LavoError::DataLength { rows, cols, len: index.len() });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for ix in index.iter() {
            data.push(match ix {
                Some(i) => *s.data().get(*i).ok_or_else(|| {
                    LavoError::Contract(format!("gather index {i} outside source of {} entries", s.len()))
                })?,
                None => 0.0,
            });
        }
        let value = Tensor2D::new(rows, cols, data)?;
        Ok(self.push(value, Op::Gather { src, index }))
    }

    /// Embedding lookup: row `k` of the result is row `ids[k]` of `src`.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let s = self.value(src);
        let mut data = Vec::with_capacity(ids.len() * s.cols());
        for &i in ids {
            if i >= s.rows() {
                return Err(LavoError::Contract(format!("row id {i} outside table of {} rows", s.rows())));
            }
            data.extend_from_slice(s.row(i));
        }
        let value = Tensor2D::new(ids.len(), s.cols(), data)?;
        Ok(self.push(value, Op::GatherRows { src, ids: ids.to_vec() }))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(src).slice_rows(start, len)?;
        Ok(self.push(value, Op::SliceRows { src, start }))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(src).slice_cols(start, len)?;
        Ok(self.push(value, Op::SliceCols { src, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor2D> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor2D::concat_rows(&values)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor2D> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor2D::concat_cols(&values)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Column sums as `1 x cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_rows();
        self.push(value, Op::SumRows(a))
    }

    /// Running sums down the rows: output row `t` is the sum of rows `0..=t`.
    pub fn cumsum_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 1..value.rows() {
            let prev = value.row(r - 1).to_vec();
            value.row_mut(r).iter_mut().zip(prev).for_each(|(v, p)| *v += p);
        }
        self.push(value, Op::CumSumRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows().max(1) as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of all entries as `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor2D::row_vector(&[self.value(a).sum()]);
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row layer norm with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        for p in [gain, bias] {
            if self.value(p).shape() != (1, c) {
                return Err(LavoError::Shape { op: "layer_norm", left: self.value(x).shape(), right: self.value(p).shape() });
            }
        }
        let (xhat, inv_std) = normalize_rows(self.value(x), eps);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = xhat.clone();
        for r in 0..value.rows() {
            for (j, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * g.data()[j] + b.data()[j];
            }
        }
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x))
    }

    /// Mean cross entropy of each logits row against its target id, `1 x 1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = cross_entropy_rows(self.value(logits), targets)?;
        let value = Tensor2D::row_vector(&[loss]);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Reverse sweep from a scalar node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(LavoError::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2D>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2D::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d loss / d p` into every trainable parameter on the tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.params {
            if store.is_trainable(id) {
                if let Some(g) = grads.get(v) {
                    store.accumulate_grad(id, g)?;
                }
            }
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(*b).transpose())?;
                let db = self.value(*a).transpose().matmul(g)?;
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose())?,
            Op::Add(a, b) => {
                acc(grads, *a, g.clone())?;
                acc(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone())?;
                acc(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.mul(self.value(*b))?)?;
                acc(grads, *b, g.mul(self.value(*a))?)?;
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s))?,
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone())?;
                acc(grads, *row, g.sum_rows())?;
            }
            Op::RowScale(b, h) => {
                let bv = self.value(*b);
                let hv = self.value(*h);
                acc(grads, *b, g.row_scale(hv)?)?;
                let dh: Vec<f64> = (0..bv.rows())
                    .map(|i| g.row(i).iter().zip(bv.row(i)).map(|(x, y)| x * y).sum())
                    .collect();
                acc(grads, *h, Tensor2D::column(&dh))?;
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = Tensor2D::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = y.get(r, c) * (g.get(r, c) - dot);
                    }
                }
                acc(grads, *x, dx)?;
            }
            Op::Gather { src, index } => {
                let target = slot(grads, *src, self.shape(*src));
                for (k, ix) in index.iter().enumerate() {
                    if let Some(i) = ix {
                        target.data_mut()[*i] += g.data()[k];
                    }
                }
            }
            Op::GatherRows { src, ids } => {
                let target = slot(grads, *src, self.shape(*src));
                for (k, &i) in ids.iter().enumerate() {
                    target.row_mut(i).iter_mut().zip(g.row(k)).for_each(|(t, v)| *t += v);
                }
            }
            Op::SliceRows { src, start } => {
                let target = slot(grads, *src, self.shape(*src));
                for r in 0..g.rows() {
                    target.row_mut(start + r).iter_mut().zip(g.row(r)).for_each(|(t, v)| *t += v);
                }
            }
            Op::SliceCols { src, start } => {
                let target = slot(grads, *src, self.shape(*src));
                for r in 0..g.rows() {
                    target.row_mut(r)[*start..start + g.cols()]
                        .iter_mut()
                        .zip(g.row(r))
                        .for_each(|(t, v)| *t += v);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    acc(grads, p, g.slice_rows(offset, rows)?)?;
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    acc(grads, p, g.slice_cols(offset, cols)?)?;
                    offset += cols;
                }
            }
            Op::SumRows(a) => {
                let (rows, cols) = self.shape(*a);
                let target = slot(grads, *a, (rows, cols));
                for r in 0..rows {
                    target.row_mut(r).iter_mut().zip(g.data()).for_each(|(t, v)| *t += v);
                }
            }
            Op::CumSumRows(a) => {
                let mut d = g.clone();
                for r in (0..d.rows().saturating_sub(1)).rev() {
                    let next = d.row(r + 1).to_vec();
                    d.row_mut(r).iter_mut().zip(next).for_each(|(v, n)| *v += n);
                }
                acc(grads, *a, d)?;
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                acc(grads, *a, Tensor2D::filled(rows, cols, g.data()[0]))?;
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                let c = xhat.cols() as f64;
                let mut dx = Tensor2D::zeros(xhat.rows(), xhat.cols());
                let mut dgain = vec![0.0; xhat.cols()];
                let mut dbias = vec![0.0; xhat.cols()];
                for r in 0..xhat.rows() {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let dxhat: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / c;
                    let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = inv_std[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                    }
                }
                acc(grads, *x, dx)?;
                acc(grads, *gain, Tensor2D::row_vector(&dgain))?;
                acc(grads, *bias, Tensor2D::row_vector(&dbias))?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(grads, *x, xv.zip_with(g, "gelu backward", |a, b| gelu_grad(a) * b)?)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.data()[0] / targets.len().max(1) as f64;
                let mut d = probs.scale(scale);
                for (r, &t) in targets.iter().enumerate() {
                    let v = d.get(r, t);
                    d.set(r, t, v - scale);
                }
                acc(grads, *logits, d)?;
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Tensor2D>], v: Var, shape: (usize, usize)) -> &mut Tensor2D {
    grads[v.0].get_or_insert_with(|| Tensor2D::zeros(shape.0, shape.1))
}

fn acc(grads: &mut [Option<Tensor2D>], v: Var, g: Tensor2D) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        empty => {
            *empty = Some(g);
            Ok(())
        }
    }
}
