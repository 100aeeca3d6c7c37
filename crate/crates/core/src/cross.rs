//! Orthogonal-memory cross attention: the source sequence is compressed once
//! per head and every target query attends over that fixed memory. There is
//! no local branch and no position bias.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::code_memory::{attend_memory, compress, OrthogonalBasis};
use crate::error::{LavoError, Result};
use crate::layer::LavoConfig;
use crate::linalg::orthogonal_basis;
use crate::rng::RngState;
use crate::tensor::{Element, Tensor, Tensor2D};

/// Handles to the cross-attention parameters in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct CrossParams {
    pub wq: ParamId,
    /// Head recombination, present only with more than one head.
    pub wo: Option<ParamId>,
    pub bases: Vec<ParamId>,
}

impl CrossParams {
    /// Same initialisation scheme as the self-attention layer: Gaussian
    /// projections with standard deviation `1/sqrt(d_model)`, per-head bases
    /// from stream `h` of `config.seed`.
    pub fn init(store: &mut ParamStore, prefix: &str, config: &LavoConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = RngState::new(config.seed);
        let wq = store.add(format!("{prefix}.wq"), Tensor2D::gaussian(&mut rng, d, d).scale(std), true);
        let wo = (config.heads > 1)
            .then(|| store.add(format!("{prefix}.wo"), Tensor2D::gaussian(&mut rng, d, d).scale(std), true));
        let bases = (0..config.heads)
            .map(|h| {
                let b = orthogonal_basis(config.num_bases, config.d_head(), &mut RngState::stream(config.seed, h as u64))?;
                Ok(store.add(format!("{prefix}.basis.{h}"), b, config.train_bases))
            })
            .collect::<Result<_>>()?;
        Ok(Self { wq, wo, bases })
    }

    pub fn attention(&self, store: &ParamStore, config: &LavoConfig) -> Result<CrossAttention> {
        let bases = self
            .bases
            .iter()
            .map(|&id| OrthogonalBasis::new(store.value(id).clone(), !config.train_bases))
            .collect::<Result<_>>()?;
        CrossAttention::new(
            config.clone(),
            store.value(self.wq).clone(),
            self.wo.map(|id| store.value(id).clone()),
            bases,
        )
    }
}

/// Compressed source: one `r x d_head` memory per head. Immutable once
/// built, so it can be shared by any number of target decodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceMemory<T: Element = f64> {
    heads: Vec<Tensor<T>>,
    source_len: usize,
}

impl<T: Element> SourceMemory<T> {
    pub fn heads(&self) -> &[Tensor<T>] {
        &self.heads
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttention<T: Element = f64> {
    config: LavoConfig,
    wq: Tensor<T>,
    wo: Option<Tensor<T>>,
    bases: Vec<OrthogonalBasis<T>>,
}

impl CrossAttention<f64> {
    pub fn init(config: LavoConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        CrossParams::init(&mut store, "cross", &config)?.attention(&store, &config)
    }
}

impl<T: Element> CrossAttention<T> {
    pub fn new(config: LavoConfig, wq: Tensor<T>, wo: Option<Tensor<T>>, bases: Vec<OrthogonalBasis<T>>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        if wq.shape() != (d, d) {
            return Err(LavoError::Shape { op: "cross W_q", left: (d, d), right: wq.shape() });
        }
        match (&wo, config.heads > 1) {
            (Some(w), true) if w.shape() != (d, d) => {
                return Err(LavoError::Shape { op: "cross W_o", left: (d, d), right: w.shape() })
            }
            (Some(_), true) | (None, false) => {}
            _ => return Err(LavoError::Config("cross W_o is present exactly when heads > 1".into())),
        }
        if bases.len() != config.heads
            || bases.iter().any(|b| b.num_bases() != config.num_bases || b.dim() != config.d_head())
        {
            return Err(LavoError::Config("one r x d_head basis per head expected".into()));
        }
        Ok(Self { config, wq, wo, bases })
    }

    pub fn config(&self) -> &LavoConfig {
        &self.config
    }

    /// Per-head compression of the raw source columns.
    pub fn encode_source(&self, x: &Tensor<T>) -> Result<SourceMemory<T>> {
        if x.rows() == 0 {
            return Err(LavoError::EmptyContext);
        }
        if x.cols() != self.config.d_model {
            return Err(LavoError::Shape { op: "encode_source", left: x.shape(), right: (x.rows(), self.config.d_model) });
        }
        let dh = self.config.d_head();
        let heads = self
            .bases
            .iter()
            .enumerate()
            .map(|(h, b)| compress(&x.slice_cols(h * dh, dh)?, b))
            .collect::<Result<_>>()?;
        Ok(SourceMemory { heads, source_len: x.rows() })
    }

    fn check_memory(&self, memory: &SourceMemory<T>) -> Result<()> {
        let want = (self.config.num_bases, self.config.d_head());
        if memory.heads.len() != self.config.heads || memory.heads.iter().any(|m| m.shape() != want) {
            return Err(LavoError::Contract("source memory was encoded with a different config".into()));
        }
        Ok(())
    }

    /// `m x d_model` target in, `m x d_model` out.
    pub fn forward_cross(&self, y: &Tensor<T>, memory: &SourceMemory<T>) -> Result<Tensor<T>> {
        self.check_memory(memory)?;
        if y.cols() != self.config.d_model {
            return Err(LavoError::Shape { op: "forward_cross", left: y.shape(), right: (y.rows(), self.config.d_model) });
        }
        let q = y.matmul(&self.wq)?;
        let dh = self.config.d_head();
        let scale = T::of(self.config.score_scale());
        let heads = memory
            .heads
            .iter()
            .enumerate()
            .map(|(h, mem)| attend_memory(&q.slice_cols(h * dh, dh)?, mem, scale))
            .collect::<Result<Vec<_>>>()?;
        let merged = Tensor::concat_cols(&heads)?;
        match &self.wo {
            Some(wo) => merged.matmul(wo),
            None => Ok(merged),
        }
    }
}

/// Differentiable [`CrossAttention::forward_cross`] with the source memory
/// held constant.
pub fn forward_cross_tape(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CrossParams,
    config: &LavoConfig,
    y: Var,
    memory: &SourceMemory,
) -> Result<Var> {
    let dh = config.d_head();
    if memory.heads.len() != config.heads {
        return Err(LavoError::Contract("source memory was encoded with a different config".into()));
    }
    let wq = tape.param(store, params.wq);
    let q = tape.matmul(y, wq)?;
    let mut heads = Vec::with_capacity(config.heads);
    for (h, mem) in memory.heads.iter().enumerate() {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let m = tape.constant(mem.clone());
        let mt = tape.transpose(m);
        let scores = tape.matmul(qh, mt)?;
        let scores = tape.scale(scores, config.score_scale());
        let attn = tape.softmax(scores, None)?;
        heads.push(tape.matmul(attn, m)?);
    }
    let merged = tape.concat_cols(&heads)?;
    match params.wo {
        Some(id) => {
            let wo = tape.param(store, id);
            tape.matmul(merged, wo)
        }
        None => Ok(merged),
    }
}

/// Multiply-adds of encoding an `n`-token source and attending from `m`
/// targets, split by the length each part scales with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossFlops {
    /// Basis projections of the source: `n r d_head` per head.
    pub encode: u64,
    /// Query projection, memory scores and weighted sums.
    pub attend: u64,
}

impl CrossFlops {
    pub fn total(&self) -> u64 {
        self.encode + self.attend
    }
}

pub fn cross_complexity(config: &LavoConfig, n: usize, m: usize) -> CrossFlops {
    let (n, m) = (n as u64, m as u64);
    let (d, r, dh, heads) = (config.d_model as u64, config.num_bases as u64, config.d_head() as u64, config.heads as u64);
    let encode = heads * (n * r * dh + r * dh);
    let projections = if config.heads > 1 { 2 } else { 1 } * m * d * d;
    let attend = projections + heads * 2 * m * r * dh;
    CrossFlops { encode, attend }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand(seed: u64, r: usize, c: usize) -> Tensor2D {
        Tensor2D::gaussian(&mut RngState::new(seed), r, c)
    }

    #[test]
    fn single_row_source_is_compress_base_case() {
        let cfg = LavoConfig::new(8, 2, 3, 4).with_seed(1);
        let ca = CrossAttention::init(cfg).unwrap();
        let x = rand(2, 1, 8);
        let mem = ca.encode_source(&x).unwrap();
        for h in 0..2 {
            let b = ca.bases[h].matrix();
            let xh = x.slice_cols(h * 4, 4).unwrap();
            // B (B x) row-scaled
            let proj = xh.matmul(&b.transpose()).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    assert!((mem.heads()[h].get(i, j) - proj.get(0, i) * b.get(i, j)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn empty_source_and_mismatch_errors() {
        let ca = CrossAttention::init(LavoConfig::new(8, 2, 2, 4)).unwrap();
        assert!(matches!(ca.encode_source(&Tensor2D::zeros(0, 8)), Err(LavoError::EmptyContext)));
        let other = CrossAttention::init(LavoConfig::new(8, 2, 3, 4)).unwrap();
        let mem = other.encode_source(&rand(1, 5, 8)).unwrap();
        assert!(matches!(ca.forward_cross(&rand(2, 3, 8), &mem), Err(LavoError::Contract(_))));
    }

    #[test]
    fn one_basis_broadcasts_the_single_memory_row() {
        let cfg = LavoConfig::new(6, 1, 1, 2);
        let ca = CrossAttention::init(cfg).unwrap();
        let mem = ca.encode_source(&rand(3, 9, 6)).unwrap();
        let out = ca.forward_cross(&rand(4, 5, 6), &mem).unwrap();
        for i in 0..5 {
            assert_eq!(out.row(i), mem.heads()[0].row(0));
        }
    }

    #[test]
    fn single_target_matches_formula() {
        let cfg = LavoConfig::new(8, 2, 3, 4).with_seed(7);
        let ca = CrossAttention::init(cfg).unwrap();
        let (x, y) = (rand(5, 11, 8), rand(6, 1, 8));
        let out = ca.forward_cross(&y, &ca.encode_source(&x).unwrap()).unwrap();
        let q = y.matmul(&ca.wq).unwrap();
        let mut merged = Vec::new();
        for h in 0..2 {
            let b = ca.bases[h].matrix();
            let mut mem = vec![vec![0.0; 4]; 3];
            for (i, row) in mem.iter_mut().enumerate() {
                let mean: f64 = (0..11).map(|t| (0..4).map(|j| b.get(i, j) * x.get(t, h * 4 + j)).sum::<f64>()).sum::<f64>() / 11.0;
                for (j, v) in row.iter_mut().enumerate() {
                    *v = mean * b.get(i, j);
                }
            }
            let scores: Vec<f64> =
                mem.iter().map(|m| (0..4).map(|j| q.get(0, h * 4 + j) * m[j]).sum::<f64>() / 2.0).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..4 {
                merged.push((0..3).map(|i| scores[i].exp() / z * mem[i][j]).sum::<f64>());
            }
        }
        let want = Tensor2D::row_vector(&merged).matmul(ca.wo.as_ref().unwrap()).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn reused_memory_equals_fresh_runs() {
        let ca = CrossAttention::init(LavoConfig::new(8, 2, 2, 4).with_seed(3)).unwrap();
        let x = rand(1, 20, 8);
        let mem = ca.encode_source(&x).unwrap();
        for (seed, m) in [(2, 3), (3, 7)] {
            let y = rand(seed, m, 8);
            let fresh = ca.forward_cross(&y, &ca.encode_source(&x).unwrap()).unwrap();
            assert_eq!(ca.forward_cross(&y, &mem).unwrap(), fresh);
            assert_eq!(fresh.shape(), (m, 8));
        }
    }

    #[test]
    fn audit_is_linear_in_both_lengths() {
        let cfg = LavoConfig::new(64, 2, 16, 16);
        let base = cross_complexity(&cfg, 100, 50);
        assert_eq!(cross_complexity(&cfg, 200, 50).encode - base.encode, base.encode - cross_complexity(&cfg, 0, 50).encode);
        assert_eq!(cross_complexity(&cfg, 100, 100).attend, 2 * base.attend);
        assert_eq!(cross_complexity(&cfg, 200, 50).attend, base.attend);
    }

    #[test]
    fn tape_matches_plain_and_wq_gradient_checks() {
        let cfg = LavoConfig::new(8, 2, 2, 4).with_seed(5);
        let mut store = ParamStore::new();
        let params = CrossParams::init(&mut store, "c", &cfg).unwrap();
        let ca = params.attention(&store, &cfg).unwrap();
        let (x, y, target) = (rand(1, 12, 8), rand(2, 5, 8), rand(3, 5, 8));
        let mem = ca.encode_source(&x).unwrap();
        let loss = |store: &ParamStore, tape: &mut Tape| {
            let yv = tape.constant(y.clone());
            let out = forward_cross_tape(tape, store, &params, &cfg, yv, &mem).unwrap();
            let t = tape.constant(target.clone());
            let p = tape.mul(out, t).unwrap();
            (out, tape.sum(p))
        };
        let mut tape = Tape::new();
        let (out, l) = loss(&store, &mut tape);
        assert!(tape.value(out).max_abs_diff(&ca.forward_cross(&y, &mem).unwrap()) < 1e-14);
        tape.backward(l, &mut store).unwrap();
        let analytic = store.grad(params.wq).clone();
        let mut numeric = Tensor2D::zeros(8, 8);
        for i in 0..64 {
            let orig = store.value(params.wq).data()[i];
            let mut eval = |delta: f64| {
                store.value_mut(params.wq).data_mut()[i] = orig + delta;
                let mut tape = Tape::new();
                let (_, l) = loss(&store, &mut tape);
                tape.value(l).data()[0]
            };
            numeric.data_mut()[i] = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            store.value_mut(params.wq).data_mut()[i] = orig;
        }
        assert!(analytic.sub(&numeric).unwrap().frobenius() / numeric.frobenius() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prop_source_permutation_invariance(n in 1usize..40, seed in 0u64..500, shift in 0usize..40) {
            let ca = CrossAttention::init(LavoConfig::new(8, 2, 3, 4).with_seed(seed)).unwrap();
            let x = rand(seed + 1, n, 8);
            let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row((i * 7 + shift) % n).to_vec()).collect();
            let perm: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
            let mut seen = perm.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assume!(seen.len() == n);
            let xp = Tensor2D::from_rows(&rows).unwrap();
            let y = rand(seed + 2, 4, 8);
            let a = ca.forward_cross(&y, &ca.encode_source(&x).unwrap()).unwrap();
            let b = ca.forward_cross(&y, &ca.encode_source(&xp).unwrap()).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }
}
