//! Dense row-major matrices and the handful of primitives attention needs.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{LavoError, Result};
use crate::rng::RngState;

/// Scalar types a [`Tensor`] can hold. Products go through `matrixmultiply`.
pub trait Element: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = a * b` for row-major `a` (m x k) and `b` (k x n).
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Element for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: slice lengths checked above; strides describe dense row-major layouts.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn of(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

impl Element for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: as for f64.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn of(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// The 64-bit matrix used by every correctness path.
pub type Tensor2D = Tensor<f64>;

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "\n  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "\n]")
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LavoError::DataLength { rows, cols, len: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LavoError::Shape { op: "from_rows", left: (1, cols), right: (1, r.len()) });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// 1 x n matrix.
    pub fn row_vector(values: &[T]) -> Self {
        Self { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    /// n x 1 matrix.
    pub fn column(values: &[T]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    /// Matrix of independent standard normal draws.
    pub fn gaussian(rng: &mut RngState, rows: usize, cols: usize) -> Self {
        let data = (0..rows * cols).map(|_| T::of(rng.normal())).collect();
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LavoError::Shape { op, left: self.shape(), right: other.shape() });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(LavoError::Shape { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        if self.rows > 0 && other.cols > 0 && self.cols > 0 {
            T::gemm(self.rows, self.cols, other.cols, &self.data, &other.data, &mut out.data);
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Column sums as a 1 x cols matrix.
    pub fn sum_rows(&self) -> Self {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o = *o + v;
            }
        }
        Self { rows: 1, cols: self.cols, data: out }
    }

    /// Column means as a 1 x cols matrix. Zero rows yields zeros.
    pub fn mean_rows(&self) -> Self {
        if self.rows == 0 {
            return Self::zeros(1, self.cols);
        }
        let n = T::of(self.rows as f64);
        self.sum_rows().map(|v| v / n)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Scales row `i` of `self` by `h[i]`, realising `B ⊙ H` for a column `h`.
    pub fn row_scale(&self, h: &Self) -> Result<Self> {
        if h.cols != 1 || h.rows != self.rows {
            return Err(LavoError::Shape { op: "row_scale", left: self.shape(), right: h.shape() });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let s = h.data[r];
            for v in out.row_mut(r) {
                *v = *v * s;
            }
        }
        Ok(out)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows {
            return Err(LavoError::Shape { op: "slice_rows", left: self.shape(), right: (start, len) });
        }
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Ok(Self { rows: len, cols: self.cols, data })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols {
            return Err(LavoError::Shape { op: "slice_cols", left: self.shape(), right: (start, len) });
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(Self { rows: self.rows, cols: len, data })
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(LavoError::Shape { op: "concat_rows", left: (rows, cols), right: p.shape() });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    /// Places matrices side by side.
    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(LavoError::Shape { op: "concat_cols", left: (rows, 0), right: p.shape() });
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if self.shape() != other.shape() {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Boolean visibility pattern for attention scores; `true` means the entry
/// may be attended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
}

impl Mask {
    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Self { rows, cols, visible: vec![true; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                visible.push(f(r, c));
            }
        }
        Self { rows, cols, visible }
    }

    /// Lower-triangular pattern: row `i` sees columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_visible(&self, r: usize, c: usize) -> bool {
        self.visible[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.visible[r * self.cols..(r + 1) * self.cols]
    }
}

/// Row-wise softmax of `scores + bias` over the entries `mask` leaves
/// visible. Masked entries get probability exactly zero. The row maximum is
/// subtracted before exponentiating.
pub fn softmax_rows<T: Element>(scores: &Tensor<T>, bias: Option<&Tensor<T>>, mask: Option<&Mask>) -> Result<Tensor<T>> {
    if let Some(b) = bias {
        if b.shape() != scores.shape() {
            return Err(LavoError::Shape { op: "softmax_rows bias", left: scores.shape(), right: b.shape() });
        }
    }
    if let Some(m) = mask {
        if m.shape() != scores.shape() {
            return Err(LavoError::Shape { op: "softmax_rows mask", left: scores.shape(), right: m.shape() });
        }
    }
    let cols = scores.cols();
    let mut out = Tensor::zeros(scores.rows(), cols);
    let mut logits = vec![T::zero(); cols];
    for r in 0..scores.rows() {
        let row = scores.row(r);
        for c in 0..cols {
            logits[c] = match bias {
                Some(b) => row[c] + b.get(r, c),
                None => row[c],
            };
        }
        let visible = |c: usize| mask.is_none_or(|m| m.is_visible(r, c));
        let max = (0..cols)
            .filter(|&c| visible(c))
            .map(|c| logits[c])
            .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.max(v))))
            .ok_or(LavoError::DegenerateRow { row: r })?;
        let orow = out.row_mut(r);
        let mut total = T::zero();
        for c in 0..cols {
            if visible(c) {
                let e = (logits[c] - max).exp();
                orow[c] = e;
                total = total + e;
            }
        }
        for v in orow.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}
