use std::collections::VecDeque;

use super::{LavoConfig, LavoWeights};
use crate::code_memory::{attend_memory, MemoryRead, OrthoMemoryState, OrthogonalBasis};
use crate::error::{LavoError, Result};
use crate::tensor::{softmax_rows, Element, Tensor};

#[derive(Debug, Clone)]
struct HeadCache<T: Element> {
    memory: OrthoMemoryState<T>,
    keys: VecDeque<Vec<T>>,
    values: VecDeque<Vec<T>>,
    /// Local outputs of the current, not yet completed window.
    pending: Vec<Vec<T>>,
}

/// Incremental decoding state for one sequence through one layer.
///
/// Holds, per head, the orthogonal memory, the last `w` keys and values,
/// and the local outputs of the window in progress. Nothing grows with the
/// number of steps.
#[derive(Debug, Clone)]
pub struct CausalCache<T: Element = f64> {
    heads: Vec<HeadCache<T>>,
    position: u64,
    window: usize,
    d_head: usize,
}

impl<T: Element> CausalCache<T> {
    pub fn new(config: &LavoConfig) -> Result<Self> {
        config.validate()?;
        if !config.causal {
            return Err(LavoError::Config("incremental decoding needs a causal layer".into()));
        }
        let head = HeadCache {
            memory: OrthoMemoryState::new(config.num_bases),
            keys: VecDeque::with_capacity(config.window),
            values: VecDeque::with_capacity(config.window),
            pending: Vec::with_capacity(config.window),
        };
        Ok(Self { heads: vec![head; config.heads], position: 0, window: config.window, d_head: config.d_head() })
    }

    /// Number of tokens consumed.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Largest buffer occupancy across heads: (keys, pending outputs).
    pub fn buffer_lens(&self) -> (usize, usize) {
        self.heads.iter().fold((0, 0), |(k, p), h| (k.max(h.keys.len()), p.max(h.pending.len())))
    }

    /// Fixed-width encoding: position, then per head the memory state and
    /// each buffer as a length followed by `w` zero-padded slots.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.position.to_le_bytes());
        let slots = |out: &mut Vec<u8>, buf: &mut dyn Iterator<Item = &Vec<T>>, len: usize| {
            out.extend_from_slice(&(len as u32).to_le_bytes());
            let mut written = 0;
            for v in buf {
                for x in v {
                    out.extend_from_slice(&x.as_f64().to_le_bytes());
                }
                written += 1;
            }
            out.resize(out.len() + (self.window - written) * self.d_head * 8, 0);
        };
        for h in &self.heads {
            out.extend_from_slice(&h.memory.to_bytes());
            slots(&mut out, &mut h.keys.iter(), h.keys.len());
            slots(&mut out, &mut h.values.iter(), h.values.len());
            slots(&mut out, &mut h.pending.iter(), h.pending.len());
        }
        out
    }

    pub(super) fn step(&mut self, config: &LavoConfig, weights: &LavoWeights<T>, x_t: &[T]) -> Result<Vec<T>> {
        if x_t.len() != config.d_model {
            return Err(LavoError::Shape { op: "step input", left: (1, x_t.len()), right: (1, config.d_model) });
        }
        if self.heads.len() != config.heads || self.window != config.window || self.d_head != config.d_head() {
            return Err(LavoError::Contract("cache was built for a different layer config".into()));
        }
        let x = Tensor::row_vector(x_t);
        let (q, k, v) = (x.matmul(&weights.wq)?, x.matmul(&weights.wk)?, x.matmul(&weights.wv)?);
        let (w, dh) = (config.window, config.d_head());
        let scale = T::of(config.score_scale());
        let half = T::of(0.5);
        let completes_window = (self.position as usize + 1) % w == 0;
        let mut fused_heads = Vec::with_capacity(config.heads * dh);
        for (h, head) in self.heads.iter_mut().enumerate() {
            let span = h * dh..(h + 1) * dh;
            let q_h = Tensor::row_vector(&q.data()[span.clone()]);
            head.keys.push_back(k.data()[span.clone()].to_vec());
            head.values.push_back(v.data()[span.clone()].to_vec());
            if head.keys.len() > w {
                head.keys.pop_front();
                head.values.pop_front();
            }
            let pos = config.use_epe.then(|| weights.pos[h].data());
            let f_local = attend_buffer(&q_h, &head.keys, &head.values, pos, w, scale)?;
            let basis: &OrthogonalBasis<T> = &weights.bases[h];
            let fused = if config.use_dissection {
                let fused = match head.memory.read(basis) {
                    MemoryRead::Empty => f_local.clone(),
                    MemoryRead::Memory(mem) => f_local.add(&attend_memory(&q_h, &mem, scale)?)?.scale(half),
                };
                head.pending.push(f_local.into_data());
                if completes_window {
                    let block = Tensor::from_rows(&head.pending)?;
                    head.memory.update_block(basis, &block)?;
                    head.pending.clear();
                }
                fused
            } else {
                head.memory.update(basis, &x_t[span])?;
                let read = head.memory.read(basis);
                let mem = read.memory().ok_or(LavoError::EmptyContext)?;
                f_local.add(&attend_memory(&q_h, mem, scale)?)?.scale(half)
            };
            fused_heads.extend_from_slice(fused.data());
        }
        self.position += 1;
        Ok(Tensor::row_vector(&fused_heads).matmul(&weights.wo)?.into_data())
    }
}

/// Attention of the newest query over the buffered keys; the last buffer
/// entry is the query's own position.
fn attend_buffer<T: Element>(
    q: &Tensor<T>,
    keys: &VecDeque<Vec<T>>,
    values: &VecDeque<Vec<T>>,
    pos: Option<&[T]>,
    window: usize,
    scale: T,
) -> Result<Tensor<T>> {
    let len = keys.len();
    let k = Tensor::from_rows(&keys.iter().collect::<Vec<_>>())?;
    let v = Tensor::from_rows(&values.iter().collect::<Vec<_>>())?;
    let scores = q.matmul(&k.transpose())?.scale(scale);
    // key at buffer slot `c` sits `len - 1 - c` positions before the query
    let bias = pos.map(|p| {
        let row: Vec<T> = (0..len).map(|c| p[window - len + c]).collect();
        Tensor::row_vector(&row)
    });
    softmax_rows(&scores, bias.as_ref(), None)?.matmul(&v)
}
