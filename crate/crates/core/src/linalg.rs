//! Orthogonal initialisation.

use crate::error::{LavoError, Result};
use crate::rng::RngState;
use crate::tensor::Tensor2D;

/// Draws an `r x d` matrix with orthonormal rows.
///
/// A `d x r` standard Gaussian matrix is factored with Householder QR and
/// the rows of the result are the columns of `Q`, each flipped so the
/// matching diagonal entry of `R` is non-negative. The sign fix makes the
/// output a deterministic function of the Gaussian draw.
pub fn orthogonal_basis(r: usize, d: usize, rng: &mut RngState) -> Result<Tensor2D> {
    if r == 0 || r > d {
        return Err(LavoError::InfeasibleBasis { rows: r, dim: d });
    }
    let gaussian = Tensor2D::gaussian(rng, d, r);
    let (q, diag) = householder_thin_q(&gaussian);
    let mut basis = q.transpose();
    for (k, &rkk) in diag.iter().enumerate() {
        if rkk < 0.0 {
            for v in basis.row_mut(k) {
                *v = -*v;
            }
        }
    }
    Ok(basis)
}

/// Thin Householder QR of a tall `m x n` matrix. Returns `Q` (m x n) and the
/// diagonal of `R`.
fn householder_thin_q(a: &Tensor2D) -> (Tensor2D, Vec<f64>) {
    let (m, n) = a.shape();
    let mut work = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut diag = Vec::with_capacity(n);
    for k in 0..n {
        let norm = (k..m).map(|i| work.get(i, k).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push(vec![0.0; m - k]);
            diag.push(0.0);
            continue;
        }
        let x0 = work.get(k, k);
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| work.get(i, k)).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            v.iter_mut().for_each(|x| *x /= vnorm);
        }
        apply_reflector(&mut work, &v, k, k);
        diag.push(alpha);
        reflectors.push(v);
    }
    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of the identity.
    let mut q = Tensor2D::zeros(m, n);
    for i in 0..n {
        q.set(i, i, 1.0);
    }
    for k in (0..n).rev() {
        apply_reflector(&mut q, &reflectors[k], k, 0);
    }
    (q, diag)
}

/// Applies `I - 2 v v^T` to rows `row0..` and columns `col0..` of `a`.
fn apply_reflector(a: &mut Tensor2D, v: &[f64], row0: usize, col0: usize) {
    let cols = a.cols();
    for c in col0..cols {
        let dot: f64 = v.iter().enumerate().map(|(i, vi)| vi * a.get(row0 + i, c)).sum();
        if dot != 0.0 {
            for (i, vi) in v.iter().enumerate() {
                let cur = a.get(row0 + i, c);
                a.set(row0 + i, c, cur - 2.0 * vi * dot);
            }
        }
    }
}

/// `max |B B^T - I|` over all entries.
pub fn orthonormality_error(b: &Tensor2D) -> f64 {
    let gram = b.matmul(&b.transpose()).expect("square gram");
    gram.sub(&Tensor2D::identity(b.rows())).expect("same shape").max_abs()
}
