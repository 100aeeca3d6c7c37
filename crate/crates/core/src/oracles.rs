//! Slow references that share only the tensor and compression primitives
//! with the layer implementation.
//!
//! Everything here is written per query with explicit loops: which keys a
//! query sees, which position bias it reads and which tokens the memory
//! holds are re-derived from the rules, not from the windowed code path.
//! [`naive_causal_lavo`] recompresses the memory from scratch for every
//! query, so its cost grows quadratically with sequence length.

use crate::code_memory::{attend_memory, compress};
use crate::error::{LavoError, Result};
use crate::layer::{LavoConfig, LavoWeights};
use crate::tensor::{Element, Tensor};

/// Exact softmax attention, one query at a time. With `causal`, query `t`
/// sees keys `0..=t`.
pub fn vanilla_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
    scale: T,
) -> Result<Tensor<T>> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(LavoError::Shape { op: "vanilla_attention", left: q.shape(), right: k.shape() });
    }
    if causal && q.rows() > k.rows() {
        return Err(LavoError::Shape { op: "vanilla_attention causal", left: q.shape(), right: k.shape() });
    }
    let mut out = Tensor::zeros(q.rows(), v.cols());
    let mut scores = vec![T::zero(); k.rows()];
    for t in 0..q.rows() {
        let visible = if causal { t + 1 } else { k.rows() };
        if visible == 0 {
            return Err(LavoError::DegenerateRow { row: t });
        }
        let qt = q.row(t);
        let mut max = T::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate().take(visible) {
            *s = qt.iter().zip(k.row(j)).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
            max = max.max(*s);
        }
        let mut total = T::zero();
        for s in scores.iter_mut().take(visible) {
            *s = (*s - max).exp();
            total = total + *s;
        }
        let orow = out.row_mut(t);
        for (j, &s) in scores.iter().enumerate().take(visible) {
            let wgt = s / total;
            for (o, &val) in orow.iter_mut().zip(v.row(j)) {
                *o = *o + wgt * val;
            }
        }
    }
    Ok(out)
}

/// Keys query `i` sees in the local branch of a length-`n` sequence.
fn local_keys(i: usize, n: usize, w: usize, causal: bool) -> std::ops::Range<usize> {
    let first = (i + 1).saturating_sub(w);
    if causal {
        first..i + 1
    } else {
        // left neighbours within w-1, right neighbours up to the window end
        let window_end = ((i / w + 1) * w).min(n);
        first..window_end.min(i + w)
    }
}

/// Local attention output of query `i` for one head.
fn local_row<T: Element>(
    i: usize,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    pos: Option<&[T]>,
    cfg: &LavoConfig,
) -> Vec<T> {
    let w = cfg.window;
    let scale = T::of(cfg.score_scale());
    let keys = local_keys(i, q.rows(), w, cfg.causal);
    let logits: Vec<T> = keys
        .clone()
        .map(|j| {
            let dot = q.row(i).iter().zip(k.row(j)).fold(T::zero(), |a, (&x, &y)| a + x * y);
            let bias = pos.map_or(T::zero(), |p| p[j + w - 1 - i]);
            dot * scale + bias
        })
        .collect();
    let max = logits.iter().fold(T::neg_infinity(), |m, &l| m.max(l));
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &e| a + e);
    let mut out = vec![T::zero(); v.cols()];
    for (e, j) in exps.iter().zip(keys) {
        for (o, &val) in out.iter_mut().zip(v.row(j)) {
            *o = *o + *e / total * val;
        }
    }
    out
}

struct Projected<T: Element> {
    q: Vec<Tensor<T>>,
    k: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    raw: Vec<Tensor<T>>,
}

fn project<T: Element>(x: &Tensor<T>, weights: &LavoWeights<T>, cfg: &LavoConfig) -> Result<Projected<T>> {
    weights.check(cfg)?;
    if x.rows() == 0 {
        return Err(LavoError::EmptyInput);
    }
    if x.cols() != cfg.d_model {
        return Err(LavoError::Shape { op: "oracle input", left: x.shape(), right: (x.rows(), cfg.d_model) });
    }
    let dh = cfg.d_head();
    let (q, k, v) = (x.matmul(&weights.wq)?, x.matmul(&weights.wk)?, x.matmul(&weights.wv)?);
    let split = |m: &Tensor<T>| (0..cfg.heads).map(|h| m.slice_cols(h * dh, dh)).collect::<Result<Vec<_>>>();
    Ok(Projected { q: split(&q)?, k: split(&k)?, v: split(&v)?, raw: split(x)? })
}

fn local_matrix<T: Element>(p: &Projected<T>, h: usize, weights: &LavoWeights<T>, cfg: &LavoConfig) -> Result<Tensor<T>> {
    let pos = cfg.use_epe.then(|| weights.pos[h].data());
    let rows: Vec<Vec<T>> = (0..p.q[h].rows()).map(|i| local_row(i, &p.q[h], &p.k[h], &p.v[h], pos, cfg)).collect();
    Tensor::from_rows(&rows)
}

/// The full layer computed query by query, recompressing the memory
/// visible to each query from scratch. Handles every toggle of
/// [`LavoConfig`], including noncausal mode.
pub fn naive_causal_lavo<T: Element>(x: &Tensor<T>, weights: &LavoWeights<T>, cfg: &LavoConfig) -> Result<Tensor<T>> {
    let p = project(x, weights, cfg)?;
    let n = x.rows();
    let w = cfg.window;
    let scale = T::of(cfg.score_scale());
    let half = T::of(0.5);
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let basis = &weights.bases[h];
        let local = local_matrix(&p, h, weights, cfg)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            // tokens whose features the memory of query i holds
            let context = match (cfg.use_dissection, cfg.causal) {
                (true, true) => Some(local.slice_rows(0, (i / w) * w)?),
                (true, false) => Some(local.clone()),
                (false, true) => Some(p.raw[h].slice_rows(0, i + 1)?),
                (false, false) => Some(p.raw[h].clone()),
            }
            .filter(|c| c.rows() > 0);
            let f_local = local.slice_rows(i, 1)?;
            let row = match context {
                None => f_local,
                Some(c) => {
                    let mem = compress(&c, basis)?;
                    let global = attend_memory(&p.q[h].slice_rows(i, 1)?, &mem, scale)?;
                    f_local.add(&global)?.scale(half)
                }
            };
            rows.push(row);
        }
        heads.push(Tensor::concat_rows(&rows)?);
    }
    Tensor::concat_cols(&heads)?.matmul(&weights.wo)
}

/// Local branch alone, projected by `W_o`.
pub fn local_only<T: Element>(x: &Tensor<T>, weights: &LavoWeights<T>, cfg: &LavoConfig) -> Result<Tensor<T>> {
    let p = project(x, weights, cfg)?;
    let heads = (0..cfg.heads).map(|h| local_matrix(&p, h, weights, cfg)).collect::<Result<Vec<_>>>()?;
    Tensor::concat_cols(&heads)?.matmul(&weights.wo)
}

/// Token-by-token decoding without a constant-size state: every step keeps
/// the full history of local outputs (or raw inputs) and recompresses it.
/// Per-step cost grows with the prefix length.
#[derive(Debug, Clone)]
pub struct NaiveDecoder<T: Element> {
    cfg: LavoConfig,
    weights: LavoWeights<T>,
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
    history: Vec<Vec<Vec<T>>>,
}

impl<T: Element> NaiveDecoder<T> {
    pub fn new(cfg: LavoConfig, weights: LavoWeights<T>) -> Result<Self> {
        weights.check(&cfg)?;
        if !cfg.causal {
            return Err(LavoError::Config("decoding needs a causal layer".into()));
        }
        let empty = vec![Vec::new(); cfg.heads];
        Ok(Self { cfg, weights, keys: empty.clone(), values: empty.clone(), history: empty })
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&mut self, x_t: &[T]) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let x = Tensor::row_vector(x_t);
        let (q, k, v) = (x.matmul(&self.weights.wq)?, x.matmul(&self.weights.wk)?, x.matmul(&self.weights.wv)?);
        let (dh, w) = (cfg.d_head(), cfg.window);
        let i = self.len();
        let scale = T::of(cfg.score_scale());
        let mut fused = Vec::with_capacity(cfg.d_model);
        for h in 0..cfg.heads {
            let span = h * dh..(h + 1) * dh;
            self.keys[h].push(k.data()[span.clone()].to_vec());
            self.values[h].push(v.data()[span.clone()].to_vec());
            let first = (i + 1).saturating_sub(w);
            let kt = Tensor::from_rows(&self.keys[h][first..])?;
            let vt = Tensor::from_rows(&self.values[h][first..])?;
            let qt = Tensor::row_vector(&q.data()[span.clone()]);
            let q1 = Tensor::concat_rows(&vec![qt.clone(); kt.rows()])?;
            let pos = cfg.use_epe.then(|| self.weights.pos[h].data());
            // reuse the per-query reference on a buffer where the query is last
            let mut local_cfg = cfg.clone();
            local_cfg.causal = true;
            let f_local = local_row(kt.rows() - 1, &q1, &kt, &vt, pos.map(|p| &p[..]), &local_cfg);
            let context = if cfg.use_dissection {
                self.history[h].push(f_local.clone());
                (i / w) * w
            } else {
                self.history[h].push(x_t[span].to_vec());
                i + 1
            };
            let out = if context == 0 {
                f_local
            } else {
                let mem = compress(&Tensor::from_rows(&self.history[h][..context])?, &self.weights.bases[h])?;
                let global = attend_memory(&qt, &mem, scale)?;
                f_local.iter().zip(global.data()).map(|(&a, &b)| (a + b) * T::of(0.5)).collect()
            };
            fused.extend(out);
        }
        Ok(Tensor::row_vector(&fused).matmul(&self.weights.wo)?.into_data())
    }
}
