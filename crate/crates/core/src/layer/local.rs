//! Window dissection and local attention with embedded relative positions.
//!
//! The sequence is cut into windows of `w` tokens. Each window's queries see
//! a key range extended `w` tokens to the left, masked so that a query at
//! absolute position `i` attends to at most `w` keys `j`:
//!
//! * causal: `i - w < j <= i`
//! * noncausal: `|j - i| < w` and `j` inside the extended range (no right
//!   extension past the window end)
//!
//! The score of a visible pair gets `P[j - i + w - 1]` added when embedded
//! position encoding is on; the index always falls in `0..=2w-2`.

use std::rc::Rc;

use crate::error::{LavoError, Result};
use crate::tensor::{softmax_rows, Element, Mask, Tensor};

/// One window's query range and extended key range plus its precomputed
/// mask and relative-position index map.
#[derive(Debug, Clone)]
pub struct WindowSpec {
    pub start: usize,
    pub len: usize,
    pub key_start: usize,
    pub key_len: usize,
    pub mask: Rc<Mask>,
    /// Row-major `len x key_len`; `None` for masked pairs.
    pub bias_index: Rc<Vec<Option<usize>>>,
}

/// Whether query `i` may attend key `j` within the local branch.
pub fn visible(i: usize, j: usize, window: usize, causal: bool) -> bool {
    if causal {
        j <= i && i - j < window
    } else {
        i.abs_diff(j) < window
    }
}

/// Index into the relative position table for query `i`, key `j`.
pub fn bias_index(i: usize, j: usize, window: usize) -> Option<usize> {
    (j + window).checked_sub(i + 1).filter(|&k| k < 2 * window - 1)
}

/// Windows covering `0..n`.
pub fn dissect(n: usize, window: usize, causal: bool) -> Result<Vec<WindowSpec>> {
    if window == 0 {
        return Err(LavoError::Config("window must be at least 1".into()));
    }
    let mut specs = Vec::with_capacity(n.div_ceil(window));
    let mut start = 0;
    while start < n {
        let end = (start + window).min(n);
        let key_start = start.saturating_sub(window);
        let (len, key_len) = (end - start, end - key_start);
        let mask = Mask::from_fn(len, key_len, |r, c| visible(start + r, key_start + c, window, causal));
        let mut index = Vec::with_capacity(len * key_len);
        for r in 0..len {
            for c in 0..key_len {
                let (i, j) = (start + r, key_start + c);
                index.push(if mask.is_visible(r, c) {
                    Some(bias_index(i, j, window).ok_or_else(|| {
                        LavoError::Contract(format!("relative offset {j}-{i} outside window {window}"))
                    })?)
                } else {
                    None
                });
            }
        }
        specs.push(WindowSpec { start, len, key_start, key_len, mask: Rc::new(mask), bias_index: Rc::new(index) });
        start = end;
    }
    Ok(specs)
}

/// Attention of a window's queries over its extended keys.
///
/// `pos` is the relative position table (length `2w - 1`); `None` disables
/// the bias entirely.
pub fn local_attention<T: Element>(
    q_win: &Tensor<T>,
    k_ext: &Tensor<T>,
    v_ext: &Tensor<T>,
    pos: Option<&[T]>,
    spec: &WindowSpec,
    scale: T,
) -> Result<Tensor<T>> {
    if q_win.rows() != spec.len || k_ext.rows() != spec.key_len || v_ext.rows() != spec.key_len {
        return Err(LavoError::Shape { op: "local_attention", left: q_win.shape(), right: k_ext.shape() });
    }
    let scores = q_win.matmul(&k_ext.transpose())?.scale(scale);
    let bias = match pos {
        Some(p) => {
            let mut data = Vec::with_capacity(spec.bias_index.len());
            for ix in spec.bias_index.iter() {
                data.push(match ix {
                    Some(k) => *p.get(*k).ok_or_else(|| {
                        LavoError::Contract(format!("bias index {k} outside table of {}", p.len()))
                    })?,
                    None => T::zero(),
                });
            }
            Some(Tensor::new(spec.len, spec.key_len, data)?)
        }
        None => None,
    };
    softmax_rows(&scores, bias.as_ref(), Some(&spec.mask))?.matmul(v_ext)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::Tensor2D;

    #[test]
    fn self_offset_is_centre() {
        for w in 1..6 {
            assert_eq!(bias_index(7, 7, w), Some(w - 1));
        }
        assert_eq!(bias_index(10, 7, 4), Some(0));
        assert_eq!(bias_index(7, 10, 4), Some(6));
        assert_eq!(bias_index(10, 6, 4), None);
    }

    #[test]
    fn causal_windows_see_exactly_w_keys() {
        let (n, w) = (11, 4);
        for spec in dissect(n, w, true).unwrap() {
            for r in 0..spec.len {
                let i = spec.start + r;
                let seen = spec.mask.row(r).iter().filter(|&&v| v).count();
                assert_eq!(seen, (i + 1).min(w));
                for c in 0..spec.key_len {
                    if let Some(k) = spec.bias_index[r * spec.key_len + c] {
                        assert!(k < w, "causal bias must only read past offsets");
                    }
                }
            }
        }
    }

    #[test]
    fn boundary_token_looks_back_across_windows() {
        let specs = dissect(12, 4, true).unwrap();
        let second = &specs[1];
        assert_eq!((second.start, second.key_start, second.key_len), (4, 0, 8));
        // query 4 sees keys 1..=4
        let row: Vec<bool> = second.mask.row(0).to_vec();
        assert_eq!(row, vec![false, true, true, true, true, false, false, false]);
    }

    #[test]
    fn noncausal_mask_uses_both_sides() {
        let specs = dissect(8, 4, false).unwrap();
        let s = &specs[1];
        // query 4: keys 1..=7 visible, and offset +3 reads P[6]
        assert_eq!(s.mask.row(0).iter().filter(|&&v| v).count(), 7);
        assert_eq!(s.bias_index[7], Some(6));
    }

    #[test]
    fn equal_keys_zero_bias_returns_value_row() {
        let spec = &dissect(3, 3, true).unwrap()[0];
        let q = Tensor2D::gaussian(&mut RngState::new(1), 3, 2);
        let k = Tensor2D::filled(3, 2, 0.3);
        let v = Tensor2D::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let out = local_attention(&q, &k, &v, Some(&[0.0; 5]), spec, 1.0).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn single_window_equals_causal_vanilla() {
        let n = 5;
        let spec = &dissect(n, 8, true).unwrap()[0];
        let mut rng = RngState::new(4);
        let (q, k, v) = (
            Tensor2D::gaussian(&mut rng, n, 3),
            Tensor2D::gaussian(&mut rng, n, 3),
            Tensor2D::gaussian(&mut rng, n, 3),
        );
        let out = local_attention(&q, &k, &v, None, spec, 0.5).unwrap();
        let scores = q.matmul(&k.transpose()).unwrap().scale(0.5);
        let want = softmax_rows(&scores, None, Some(&Mask::causal(n))).unwrap().matmul(&v).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn zero_table_equals_no_bias() {
        let spec = &dissect(9, 3, true).unwrap()[2];
        let mut rng = RngState::new(5);
        let q = Tensor2D::gaussian(&mut rng, spec.len, 4);
        let k = Tensor2D::gaussian(&mut rng, spec.key_len, 4);
        let v = Tensor2D::gaussian(&mut rng, spec.key_len, 4);
        let a = local_attention(&q, &k, &v, Some(&[0.0; 5]), spec, 0.5).unwrap();
        let b = local_attention(&q, &k, &v, None, spec, 0.5).unwrap();
        assert_eq!(a, b);
    }
}
