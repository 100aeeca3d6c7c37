//! Context compression via orthogonal decomposition.
//!
//! A context `X` (n x d) is projected onto `r` orthonormal basis rows `B`
//! and the projections are averaged: `H = (1/n) sum_t B x_t` (r x 1). The
//! memory is `B ⊙ H`, i.e. basis row `i` scaled by `H[i]`, so its rows stay
//! mutually orthogonal. The causal form keeps only `sum_t B x_t` and the
//! token count, which gives the same `H_t` as the incremental mean
//! `H_t = ((t-1) H_{t-1} + B x_t) / t` with a footprint of `r` values.

use crate::error::{LavoError, Result};
use crate::linalg::{orthogonal_basis, orthonormality_error};
use crate::rng::RngState;
use crate::tensor::{softmax_rows, Element, Tensor};

/// Tolerance on `|B B^T - I|` accepted for a frozen basis. Loose enough
/// for a basis that was rounded to 32-bit floats, e.g. in a checkpoint.
pub const ORTHONORMAL_TOL: f64 = 1e-5;

/// Row-orthonormal `r x d` basis.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalBasis<T: Element = f64> {
    b: Tensor<T>,
    frozen: bool,
}

impl OrthogonalBasis<f64> {
    /// Fresh basis drawn with [`orthogonal_basis`]; frozen.
    pub fn random(r: usize, d: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self { b: orthogonal_basis(r, d, rng)?, frozen: true })
    }
}

impl<T: Element> OrthogonalBasis<T> {
    /// Wraps a matrix. Frozen bases must be orthonormal within
    /// [`ORTHONORMAL_TOL`]; trainable ones are accepted as-is.
    pub fn new(b: Tensor<T>, frozen: bool) -> Result<Self> {
        if b.rows() == 0 || b.rows() > b.cols() {
            return Err(LavoError::InfeasibleBasis { rows: b.rows(), dim: b.cols() });
        }
        if frozen {
            let err = orthonormality_error(&b.cast::<f64>());
            if err >= ORTHONORMAL_TOL {
                return Err(LavoError::Contract(format!("frozen basis is not orthonormal (error {err:e})")));
            }
        }
        Ok(Self { b, frozen })
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.b
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_bases(&self) -> usize {
        self.b.rows()
    }

    pub fn dim(&self) -> usize {
        self.b.cols()
    }

    pub fn cast<U: Element>(&self) -> OrthogonalBasis<U> {
        OrthogonalBasis { b: self.b.cast(), frozen: self.frozen }
    }

    /// `B x` for a single token.
    pub fn project(&self, x: &[T]) -> Vec<T> {
        (0..self.b.rows())
            .map(|i| self.b.row(i).iter().zip(x).fold(T::zero(), |acc, (&b, &v)| acc + b * v))
            .collect()
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(LavoError::Shape { op: "orthogonal projection", left: self.b.shape(), right: (1, cols) });
        }
        Ok(())
    }

    /// `B ⊙ H` for a mean projection `h` of length `r`.
    fn memory_from_mean(&self, h: &[T]) -> Tensor<T> {
        self.b.row_scale(&Tensor::column(h)).expect("h has one entry per basis row")
    }
}

/// Batch compression of a whole context: `B ⊙ mean_t(B x_t)`.
pub fn compress<T: Element>(x: &Tensor<T>, basis: &OrthogonalBasis<T>) -> Result<Tensor<T>> {
    if x.rows() == 0 {
        return Err(LavoError::EmptyContext);
    }
    basis.check_dim(x.cols())?;
    let h = x.matmul(&basis.b.transpose())?.mean_rows();
    Ok(basis.memory_from_mean(h.data()))
}

/// Result of reading the running memory.
#[derive(Debug, Clone, PartialEq)]
pub enum MemoryRead<T: Element = f64> {
    /// Nothing has been absorbed yet.
    Empty,
    Memory(Tensor<T>),
}

impl<T: Element> MemoryRead<T> {
    pub fn is_empty(&self) -> bool {
        matches!(self, MemoryRead::Empty)
    }

    pub fn memory(&self) -> Option<&Tensor<T>> {
        match self {
            MemoryRead::Empty => None,
            MemoryRead::Memory(m) => Some(m),
        }
    }
}

/// Constant-size causal memory: running sum of projections plus a count.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoMemoryState<T: Element = f64> {
    running_sum: Vec<T>,
    count: u64,
}

impl<T: Element> OrthoMemoryState<T> {
    pub fn new(num_bases: usize) -> Self {
        Self { running_sum: vec![T::zero(); num_bases], count: 0 }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn running_sum(&self) -> &[T] {
        &self.running_sum
    }

    /// Absorbs one token: `sum += B x_t`, `count += 1`.
    pub fn update(&mut self, basis: &OrthogonalBasis<T>, x: &[T]) -> Result<()> {
        basis.check_dim(x.len())?;
        for (s, p) in self.running_sum.iter_mut().zip(basis.project(x)) {
            *s = *s + p;
        }
        self.count += 1;
        Ok(())
    }

    /// Absorbs the rows of `block` in order; equivalent to one
    /// [`update`](Self::update) per row.
    pub fn update_block(&mut self, basis: &OrthogonalBasis<T>, block: &Tensor<T>) -> Result<()> {
        if block.rows() == 0 {
            return Ok(());
        }
        basis.check_dim(block.cols())?;
        let sums = block.matmul(&basis.b.transpose())?.sum_rows();
        for (s, &p) in self.running_sum.iter_mut().zip(sums.data()) {
            *s = *s + p;
        }
        self.count += block.rows() as u64;
        Ok(())
    }

    /// `B ⊙ (sum / count)`, or [`MemoryRead::Empty`] before any update.
    pub fn read(&self, basis: &OrthogonalBasis<T>) -> MemoryRead<T> {
        if self.count == 0 {
            return MemoryRead::Empty;
        }
        let n = T::of(self.count as f64);
        let h: Vec<T> = self.running_sum.iter().map(|&s| s / n).collect();
        MemoryRead::Memory(basis.memory_from_mean(&h))
    }

    /// Fixed-width little-endian encoding: count as u64, then each running
    /// sum entry as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.running_sum.len());
        out.extend_from_slice(&self.count.to_le_bytes());
        for v in &self.running_sum {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }
}

/// `softmax(scale * q mem^T) mem`: every query attends over the memory rows.
pub fn attend_memory<T: Element>(q: &Tensor<T>, mem: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if mem.rows() == 0 {
        return Err(LavoError::Contract("attend_memory called with empty memory".into()));
    }
    if q.cols() != mem.cols() {
        return Err(LavoError::Shape { op: "attend_memory", left: q.shape(), right: mem.shape() });
    }
    let scores = q.matmul(&mem.transpose())?.scale(scale);
    softmax_rows(&scores, None, None)?.matmul(mem)
}

/// [`attend_memory`] on a [`MemoryRead`]; reading an empty memory is a
/// contract error.
pub fn attend_read<T: Element>(q: &Tensor<T>, read: &MemoryRead<T>, scale: T) -> Result<Tensor<T>> {
    match read {
        MemoryRead::Empty => Err(LavoError::Contract("attend_memory called on EMPTY memory".into())),
        MemoryRead::Memory(m) => attend_memory(q, m, scale),
    }
}
