use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use lavo::error::Result;
use lavo::layer::{LavoConfig, LavoLayer, LavoWeights};
use lavo::oracles::{naive_causal_lavo, vanilla_attention, NaiveDecoder};
use lavo::tensor::{softmax_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    /// The layer's own forward and constant-state decoding.
    Lavo,
    /// Exact causal softmax attention.
    Vanilla,
    /// Per-query memory recompression.
    Naive,
    /// Windowed attention only.
    Local,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Lavo, Mechanism::Vanilla, Mechanism::Naive, Mechanism::Local];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Lavo => "lavo",
            Mechanism::Vanilla => "vanilla",
            Mechanism::Naive => "naive",
            Mechanism::Local => "local",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mechanism `{s}` (expected lavo, vanilla, naive or local)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Forward,
    Decode,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Forward => "forward",
            Mode::Decode => "decode",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "forward" => Ok(Mode::Forward),
            "decode" => Ok(Mode::Decode),
            _ => Err(format!("unknown mode `{s}` (expected forward or decode)")),
        }
    }
}

/// Rough live-byte model of one run in 32-bit floats.
pub fn estimate_bytes(mech: Mechanism, mode: Mode, cfg: &LavoConfig, n: usize) -> u64 {
    let (n, d, w, r) = (n as u64, cfg.d_model as u64, cfg.window as u64, cfg.num_bases as u64);
    let floats = match (mech, mode) {
        // q, k, v, head slices, local outputs, fused output
        (Mechanism::Lavo | Mechanism::Local, Mode::Forward) => 10 * n * d + 2 * w * w,
        (Mechanism::Vanilla, Mode::Forward) => 8 * n * d + n,
        (Mechanism::Naive, Mode::Forward) => 12 * n * d + r * d,
        (Mechanism::Lavo | Mechanism::Local, Mode::Decode) => 3 * w * d + r * d + 4 * d,
        (Mechanism::Vanilla, Mode::Decode) => 2 * n * d + n + 4 * d,
        (Mechanism::Naive, Mode::Decode) => 4 * n * d + 2 * n * d,
    };
    4 * floats
}

/// One full forward pass over `x`.
pub fn run_forward(mech: Mechanism, layer: &LavoLayer<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let cfg = layer.config();
    let w = layer.weights();
    match mech {
        Mechanism::Lavo => layer.forward(x),
        Mechanism::Local => layer.forward_local(x),
        Mechanism::Naive => naive_causal_lavo(x, w, cfg),
        Mechanism::Vanilla => {
            let (q, k, v) = (x.matmul(&w.wq)?, x.matmul(&w.wk)?, x.matmul(&w.wv)?);
            let dh = cfg.d_head();
            let scale = cfg.score_scale() as f32;
            let heads = (0..cfg.heads)
                .map(|h| {
                    vanilla_attention(&q.slice_cols(h * dh, dh)?, &k.slice_cols(h * dh, dh)?, &v.slice_cols(h * dh, dh)?, true, scale)
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::concat_cols(&heads)?.matmul(&w.wo)
        }
    }
}

/// Stateful token-by-token decoder for each mechanism.
pub enum Decoder<'a> {
    Lavo(&'a LavoLayer<f32>, lavo::layer::CausalCache<f32>),
    Naive(NaiveDecoder<f32>),
    /// Keys and values of the whole prefix; each step attends over all of them.
    Vanilla(&'a LavoLayer<f32>, Vec<Vec<f32>>, Vec<Vec<f32>>),
    /// Keys and values of the last `w` tokens per head.
    Local(&'a LavoLayer<f32>, Vec<(VecDeque<Vec<f32>>, VecDeque<Vec<f32>>)>),
}

impl<'a> Decoder<'a> {
    pub fn new(mech: Mechanism, layer: &'a LavoLayer<f32>) -> Result<Self> {
        Ok(match mech {
            Mechanism::Lavo => Decoder::Lavo(layer, layer.cache()?),
            Mechanism::Naive => Decoder::Naive(NaiveDecoder::new(layer.config().clone(), layer.weights().clone())?),
            Mechanism::Vanilla => Decoder::Vanilla(layer, vec![Vec::new(); layer.config().heads], vec![Vec::new(); layer.config().heads]),
            Mechanism::Local => Decoder::Local(layer, vec![(VecDeque::new(), VecDeque::new()); layer.config().heads]),
        })
    }

    pub fn step(&mut self, x_t: &[f32]) -> Result<Vec<f32>> {
        match self {
            Decoder::Lavo(layer, cache) => layer.step(cache, x_t),
            Decoder::Naive(dec) => dec.step(x_t),
            Decoder::Vanilla(layer, keys, values) => {
                let (cfg, w) = (layer.config(), layer.weights());
                let dh = cfg.d_head();
                let x = Tensor::row_vector(x_t);
                let (q, k, v) = (x.matmul(&w.wq)?, x.matmul(&w.wk)?, x.matmul(&w.wv)?);
                let mut fused = Vec::with_capacity(cfg.d_model);
                for h in 0..cfg.heads {
                    keys[h].extend_from_slice(&k.data()[h * dh..(h + 1) * dh]);
                    values[h].extend_from_slice(&v.data()[h * dh..(h + 1) * dh]);
                    let len = keys[h].len() / dh;
                    let kt = Tensor::new(len, dh, keys[h].clone())?;
                    let vt = Tensor::new(len, dh, values[h].clone())?;
                    let qh = Tensor::row_vector(&q.data()[h * dh..(h + 1) * dh]);
                    fused.extend(vanilla_attention(&qh, &kt, &vt, false, cfg.score_scale() as f32)?.into_data());
                }
                Ok(Tensor::row_vector(&fused).matmul(&w.wo)?.into_data())
            }
            Decoder::Local(layer, buffers) => {
                let (cfg, w) = (layer.config(), layer.weights());
                let (dh, win) = (cfg.d_head(), cfg.window);
                let x = Tensor::row_vector(x_t);
                let (q, k, v) = (x.matmul(&w.wq)?, x.matmul(&w.wk)?, x.matmul(&w.wv)?);
                let mut fused = Vec::with_capacity(cfg.d_model);
                for (h, (kb, vb)) in buffers.iter_mut().enumerate() {
                    kb.push_back(k.data()[h * dh..(h + 1) * dh].to_vec());
                    vb.push_back(v.data()[h * dh..(h + 1) * dh].to_vec());
                    if kb.len() > win {
                        kb.pop_front();
                        vb.pop_front();
                    }
                    let kt = Tensor::from_rows(&kb.iter().collect::<Vec<_>>())?;
                    let vt = Tensor::from_rows(&vb.iter().collect::<Vec<_>>())?;
                    let qh = Tensor::row_vector(&q.data()[h * dh..(h + 1) * dh]);
                    let scores = qh.matmul(&kt.transpose())?.scale(cfg.score_scale() as f32);
                    let bias = cfg.use_epe.then(|| {
                        let p = w.pos[h].data();
                        Tensor::row_vector(&(0..kb.len()).map(|c| p[win - kb.len() + c]).collect::<Vec<_>>())
                    });
                    fused.extend(softmax_rows(&scores, bias.as_ref(), None)?.matmul(&vt)?.into_data());
                }
                Ok(Tensor::row_vector(&fused).matmul(&w.wo)?.into_data())
            }
        }
    }
}

/// Fresh f32 layer for a benchmark configuration.
pub fn bench_layer(cfg: &LavoConfig) -> Result<LavoLayer<f32>> {
    Ok(LavoLayer::new(cfg.clone(), LavoWeights::init(cfg)?)?.cast())
}
