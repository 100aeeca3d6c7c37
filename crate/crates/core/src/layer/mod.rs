//! Multi-head LAVO self-attention.
//!
//! Per head, every query gets a local feature from windowed attention (see
//! [`local`]) and a global feature from attention over the orthogonal
//! memory, and the two are averaged. With dissection on, the memory absorbs
//! the local-attention outputs of completed windows (causal) or of all
//! windows (noncausal); a causal query whose window is the first one has no
//! memory yet and keeps its local feature alone. With dissection off, the
//! memory compresses the head slice of the raw input up to and including the
//! query position. Heads are concatenated and mixed by `W_o`.

mod cache;
mod complexity;
pub mod local;
mod tape;

use serde::{Deserialize, Serialize};

pub use cache::CausalCache;
pub use complexity::{complexity_audit, FlopCount};
pub use local::{dissect, local_attention, WindowSpec};
pub use tape::forward_tape;

use crate::autodiff::{ParamId, ParamStore};
use crate::code_memory::{attend_memory, compress, MemoryRead, OrthoMemoryState, OrthogonalBasis};
use crate::error::{LavoError, Result};
use crate::linalg::orthogonal_basis;
use crate::rng::RngState;
use crate::tensor::{Element, Tensor, Tensor2D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LavoConfig {
    pub d_model: usize,
    pub heads: usize,
    pub num_bases: usize,
    pub window: usize,
    pub use_epe: bool,
    pub use_dissection: bool,
    pub causal: bool,
    /// Multiply scores by `1/sqrt(d_head)`.
    pub use_scale: bool,
    /// Let the optimiser update the bases (their orthonormality is then no
    /// longer enforced).
    pub train_bases: bool,
    /// Let the optimiser update the relative position tables.
    pub train_pos: bool,
    pub seed: u64,
}

impl LavoConfig {
    /// Causal layer with EPE, dissection and scaling on; frozen bases.
    pub fn new(d_model: usize, heads: usize, num_bases: usize, window: usize) -> Self {
        Self {
            d_model,
            heads,
            num_bases,
            window,
            use_epe: true,
            use_dissection: true,
            causal: true,
            use_scale: true,
            train_bases: false,
            train_pos: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(LavoError::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.num_bases == 0 || self.num_bases > self.d_head() {
            return Err(LavoError::Config(format!(
                "num_bases {} must lie in 1..={} (d_head)",
                self.num_bases,
                self.d_head()
            )));
        }
        if self.window == 0 {
            return Err(LavoError::Config("window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn pos_len(&self) -> usize {
        2 * self.window - 1
    }

    pub fn score_scale(&self) -> f64 {
        if self.use_scale {
            1.0 / (self.d_head() as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// Handles to a layer's parameters inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct LavoParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// One `r x d_head` basis per head.
    pub bases: Vec<ParamId>,
    /// One `1 x (2w - 1)` relative position table per head.
    pub pos: Vec<ParamId>,
}

impl LavoParams {
    /// Registers fresh parameters under `prefix`. Projections are Gaussian
    /// with standard deviation `1/sqrt(d_model)`, drawn from the stream
    /// `config.seed`; head `h` draws its basis from the xoshiro stream
    /// `h` of the same seed; position tables start at zero.
    pub fn init(store: &mut ParamStore, prefix: &str, config: &LavoConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = RngState::new(config.seed);
        let std = 1.0 / (d as f64).sqrt();
        let mut proj = |name: &str, store: &mut ParamStore| {
            store.add(format!("{prefix}.{name}"), Tensor2D::gaussian(&mut rng, d, d).scale(std), true)
        };
        let wq = proj("wq", store);
        let wk = proj("wk", store);
        let wv = proj("wv", store);
        let wo = proj("wo", store);
        let mut bases = Vec::with_capacity(config.heads);
        let mut pos = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let mut head_rng = RngState::stream(config.seed, h as u64);
            let b = orthogonal_basis(config.num_bases, config.d_head(), &mut head_rng)?;
            bases.push(store.add(format!("{prefix}.basis.{h}"), b, config.train_bases));
            pos.push(store.add(
                format!("{prefix}.pos.{h}"),
                Tensor2D::zeros(1, config.pos_len()),
                config.train_pos,
            ));
        }
        Ok(Self { wq, wk, wv, wo, bases, pos })
    }

    pub fn all(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wq, self.wk, self.wv, self.wo];
        ids.extend(&self.bases);
        ids.extend(&self.pos);
        ids
    }

    /// Snapshot of the current values as plain weights.
    pub fn weights(&self, store: &ParamStore, config: &LavoConfig) -> Result<LavoWeights> {
        let bases = self
            .bases
            .iter()
            .map(|&id| OrthogonalBasis::new(store.value(id).clone(), !config.train_bases))
            .collect::<Result<_>>()?;
        let weights = LavoWeights {
            wq: store.value(self.wq).clone(),
            wk: store.value(self.wk).clone(),
            wv: store.value(self.wv).clone(),
            wo: store.value(self.wo).clone(),
            bases,
            pos: self.pos.iter().map(|&id| store.value(id).clone()).collect(),
        };
        weights.check(config)?;
        Ok(weights)
    }
}

/// Plain (tape-free) weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LavoWeights<T: Element = f64> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bases: Vec<OrthogonalBasis<T>>,
    pub pos: Vec<Tensor<T>>,
}

impl LavoWeights<f64> {
    /// Fresh weights, identical to [`LavoParams::init`] for the same config.
    pub fn init(config: &LavoConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let params = LavoParams::init(&mut store, "layer", config)?;
        params.weights(&store, config)
    }
}

impl<T: Element> LavoWeights<T> {
    pub fn cast<U: Element>(&self) -> LavoWeights<U> {
        LavoWeights {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            bases: self.bases.iter().map(|b| b.cast()).collect(),
            pos: self.pos.iter().map(|p| p.cast()).collect(),
        }
    }

    pub fn check(&self, config: &LavoConfig) -> Result<()> {
        config.validate()?;
        let d = config.d_model;
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if w.shape() != (d, d) {
                return Err(LavoError::Shape { op: "projection weight", left: (d, d), right: w.shape() });
            }
        }
        if self.bases.len() != config.heads || self.pos.len() != config.heads {
            return Err(LavoError::Config(format!("expected per-head tensors for {} heads", config.heads)));
        }
        for b in &self.bases {
            if b.matrix().shape() != (config.num_bases, config.d_head()) {
                return Err(LavoError::Shape {
                    op: "basis",
                    left: (config.num_bases, config.d_head()),
                    right: b.matrix().shape(),
                });
            }
        }
        for p in &self.pos {
            if p.shape() != (1, config.pos_len()) {
                return Err(LavoError::Shape { op: "position table", left: (1, config.pos_len()), right: p.shape() });
            }
        }
        Ok(())
    }
}

/// A configured layer with plain weights: full-sequence forward and
/// incremental decoding.
#[derive(Debug, Clone)]
pub struct LavoLayer<T: Element = f64> {
    config: LavoConfig,
    weights: LavoWeights<T>,
}

/// Per-head query/key/value slices of one sequence.
struct HeadInputs<T: Element> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
}

impl<T: Element> LavoLayer<T> {
    pub fn new(config: LavoConfig, weights: LavoWeights<T>) -> Result<Self> {
        weights.check(&config)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &LavoConfig {
        &self.config
    }

    pub fn weights(&self) -> &LavoWeights<T> {
        &self.weights
    }

    pub fn cast<U: Element>(&self) -> LavoLayer<U> {
        LavoLayer { config: self.config.clone(), weights: self.weights.cast() }
    }

    fn scale(&self) -> T {
        T::of(self.config.score_scale())
    }

    fn pos(&self, head: usize) -> Option<&[T]> {
        self.config.use_epe.then(|| self.weights.pos[head].data())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rows() == 0 {
            return Err(LavoError::EmptyInput);
        }
        if x.cols() != self.config.d_model {
            return Err(LavoError::Shape { op: "layer input", left: x.shape(), right: (x.rows(), self.config.d_model) });
        }
        Ok(())
    }

    fn heads(&self, x: &Tensor<T>) -> Result<Vec<HeadInputs<T>>> {
        let (q, k, v) = (x.matmul(&self.weights.wq)?, x.matmul(&self.weights.wk)?, x.matmul(&self.weights.wv)?);
        let dh = self.config.d_head();
        (0..self.config.heads)
            .map(|h| {
                Ok(HeadInputs {
                    q: q.slice_cols(h * dh, dh)?,
                    k: k.slice_cols(h * dh, dh)?,
                    v: v.slice_cols(h * dh, dh)?,
                })
            })
            .collect()
    }

    /// Local-attention outputs of every window of one head, in order.
    fn local_outputs(&self, head: usize, hx: &HeadInputs<T>, specs: &[WindowSpec]) -> Result<Vec<Tensor<T>>> {
        specs
            .iter()
            .map(|s| {
                local_attention(
                    &hx.q.slice_rows(s.start, s.len)?,
                    &hx.k.slice_rows(s.key_start, s.key_len)?,
                    &hx.v.slice_rows(s.key_start, s.key_len)?,
                    self.pos(head),
                    s,
                    self.scale(),
                )
            })
            .collect()
    }

    /// Full-sequence forward pass, `n x d_model` in and out.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let cfg = &self.config;
        let specs = dissect(x.rows(), cfg.window, cfg.causal)?;
        let dh = cfg.d_head();
        let mut head_outputs = Vec::with_capacity(cfg.heads);
        for (h, hx) in self.heads(x)?.iter().enumerate() {
            let basis = &self.weights.bases[h];
            let local = self.local_outputs(h, hx, &specs)?;
            let fused = if cfg.use_dissection {
                self.fuse_dissected(hx, basis, &specs, local)?
            } else {
                let raw = x.slice_cols(h * dh, dh)?;
                self.fuse_undissected(hx, basis, &raw, local)?
            };
            head_outputs.push(fused);
        }
        Tensor::concat_cols(&head_outputs)?.matmul(&self.weights.wo)
    }

    fn fuse_dissected(
        &self,
        hx: &HeadInputs<T>,
        basis: &OrthogonalBasis<T>,
        specs: &[WindowSpec],
        local: Vec<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let half = T::of(0.5);
        let mut state = OrthoMemoryState::new(basis.num_bases());
        let mut out = Vec::with_capacity(specs.len());
        if self.config.causal {
            for (spec, f_local) in specs.iter().zip(local) {
                let fused = match state.read(basis) {
                    MemoryRead::Empty => f_local.clone(),
                    MemoryRead::Memory(mem) => {
                        let q = hx.q.slice_rows(spec.start, spec.len)?;
                        f_local.add(&attend_memory(&q, &mem, self.scale())?)?.scale(half)
                    }
                };
                if spec.len == self.config.window {
                    state.update_block(basis, &f_local)?;
                }
                out.push(fused);
            }
        } else {
            for f_local in &local {
                state.update_block(basis, f_local)?;
            }
            let read = state.read(basis);
            let mem = read.memory().ok_or(LavoError::EmptyContext)?;
            let global = attend_memory(&hx.q, mem, self.scale())?;
            let f_local = Tensor::concat_rows(&local)?;
            out.push(f_local.add(&global)?.scale(half));
        }
        Tensor::concat_rows(&out)
    }

    fn fuse_undissected(
        &self,
        hx: &HeadInputs<T>,
        basis: &OrthogonalBasis<T>,
        raw: &Tensor<T>,
        local: Vec<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let half = T::of(0.5);
        let f_local = Tensor::concat_rows(&local)?;
        let global = if self.config.causal {
            let mut state = OrthoMemoryState::new(basis.num_bases());
            let mut rows = Vec::with_capacity(raw.rows());
            for t in 0..raw.rows() {
                state.update(basis, raw.row(t))?;
                let read = state.read(basis);
                let mem = read.memory().ok_or(LavoError::EmptyContext)?;
                rows.push(attend_memory(&hx.q.slice_rows(t, 1)?, mem, self.scale())?);
            }
            Tensor::concat_rows(&rows)?
        } else {
            attend_memory(&hx.q, &compress(raw, basis)?, self.scale())?
        };
        Ok(f_local.add(&global)?.scale(half))
    }

    /// Local branch only (no global memory), projected by `W_o`.
    pub fn forward_local(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let specs = dissect(x.rows(), self.config.window, self.config.causal)?;
        let mut head_outputs = Vec::with_capacity(self.config.heads);
        for (h, hx) in self.heads(x)?.iter().enumerate() {
            head_outputs.push(Tensor::concat_rows(&self.local_outputs(h, hx, &specs)?)?);
        }
        Tensor::concat_cols(&head_outputs)?.matmul(&self.weights.wo)
    }

    /// Empty decoding state for this layer.
    pub fn cache(&self) -> Result<CausalCache<T>> {
        CausalCache::new(&self.config)
    }

    /// Emits the output for the next position and advances `cache`.
    pub fn step(&self, cache: &mut CausalCache<T>, x_t: &[T]) -> Result<Vec<T>> {
        cache.step(&self.config, &self.weights, x_t)
    }
}

impl LavoLayer<f64> {
    pub fn from_store(config: LavoConfig, params: &LavoParams, store: &ParamStore) -> Result<Self> {
        let weights = params.weights(store, &config)?;
        Self::new(config, weights)
    }

    /// Fresh layer with [`LavoWeights::init`] weights.
    pub fn init(config: LavoConfig) -> Result<Self> {
        let weights = LavoWeights::init(&config)?;
        Self::new(config, weights)
    }
}
