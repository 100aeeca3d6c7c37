//! Embedding, pre-norm LAVO blocks and a tied output head.

use lavo::autodiff::{gelu, normalize_rows, ParamId, ParamStore, Tape, Var};
use lavo::layer::{forward_tape, CausalCache, LavoLayer, LavoParams};
use lavo::rng::RngState;
use lavo::tensor::Tensor2D;

use crate::config::LmConfig;
use crate::Result;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub attn: LavoParams,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff_in: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out: ParamId,
    pub ff_out_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct LmModel {
    config: LmConfig,
    store: ParamStore,
    embed: ParamId,
    blocks: Vec<Block>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
}

impl LmModel {
    /// Fresh model. The final layer-norm gain and bias start at zero, so
    /// every logit is exactly zero until the first update.
    pub fn init(config: &LmConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mut rng = RngState::stream(config.seed, 64);
        let embed = store.add("embed", Tensor2D::gaussian(&mut rng, config.vocab_size, d), true);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("block{i}");
            let ones = || Tensor2D::filled(1, d, 1.0);
            let ln1_gain = store.add(format!("{p}.ln1.gain"), ones(), true);
            let ln1_bias = store.add(format!("{p}.ln1.bias"), Tensor2D::zeros(1, d), true);
            let attn = LavoParams::init(&mut store, &format!("{p}.attn"), &config.layer_config(i))?;
            let ln2_gain = store.add(format!("{p}.ln2.gain"), ones(), true);
            let ln2_bias = store.add(format!("{p}.ln2.bias"), Tensor2D::zeros(1, d), true);
            let ff_in = store.add(
                format!("{p}.ff.in"),
                Tensor2D::gaussian(&mut rng, d, 4 * d).scale(1.0 / (d as f64).sqrt()),
                true,
            );
            let ff_in_bias = store.add(format!("{p}.ff.in_bias"), Tensor2D::zeros(1, 4 * d), true);
            let ff_out = store.add(
                format!("{p}.ff.out"),
                Tensor2D::gaussian(&mut rng, 4 * d, d).scale(1.0 / (4.0 * d as f64).sqrt()),
                true,
            );
            let ff_out_bias = store.add(format!("{p}.ff.out_bias"), Tensor2D::zeros(1, d), true);
            blocks.push(Block { ln1_gain, ln1_bias, attn, ln2_gain, ln2_bias, ff_in, ff_in_bias, ff_out, ff_out_bias });
        }
        let lnf_gain = store.add("final_ln.gain", Tensor2D::zeros(1, d), true);
        let lnf_bias = store.add("final_ln.bias", Tensor2D::zeros(1, d), true);
        Ok(Self { config: config.clone(), store, embed, blocks, lnf_gain, lnf_bias })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Logits (`batch * len` rows, vocabulary columns) for equal-length
    /// token sequences.
    pub fn logits_tape(&self, tape: &mut Tape, sequences: &[Vec<usize>]) -> Result<Var> {
        let len = sequences.first().map_or(0, Vec::len);
        if len == 0 || sequences.iter().any(|s| s.len() != len) {
            return Err(crate::LmError::Data("sequences must be non-empty and of equal length".into()));
        }
        let ids: Vec<usize> = sequences.concat();
        let store = &self.store;
        let embed = tape.param(store, self.embed);
        let mut h = tape.gather_rows(embed, &ids)?;
        for (i, b) in self.blocks.iter().enumerate() {
            let (g1, b1) = (tape.param(store, b.ln1_gain), tape.param(store, b.ln1_bias));
            let normed = tape.layer_norm(h, g1, b1, LN_EPS)?;
            let attn = forward_tape(tape, store, &b.attn, &self.config.layer_config(i), normed, len)?;
            h = tape.add(h, attn)?;
            let (g2, b2) = (tape.param(store, b.ln2_gain), tape.param(store, b.ln2_bias));
            let normed = tape.layer_norm(h, g2, b2, LN_EPS)?;
            let (w1, c1) = (tape.param(store, b.ff_in), tape.param(store, b.ff_in_bias));
            let hidden = tape.matmul(normed, w1)?;
            let hidden = tape.add_row(hidden, c1)?;
            let hidden = tape.gelu(hidden);
            let (w2, c2) = (tape.param(store, b.ff_out), tape.param(store, b.ff_out_bias));
            let ff = tape.matmul(hidden, w2)?;
            let ff = tape.add_row(ff, c2)?;
            h = tape.add(h, ff)?;
        }
        let (gf, bf) = (tape.param(store, self.lnf_gain), tape.param(store, self.lnf_bias));
        let out = tape.layer_norm(h, gf, bf, LN_EPS)?;
        let et = tape.transpose(embed);
        Ok(tape.matmul(out, et)?)
    }

    /// Mean next-byte cross entropy of `inputs` against `targets`.
    pub fn loss_tape(&self, tape: &mut Tape, inputs: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<Var> {
        let logits = self.logits_tape(tape, inputs)?;
        Ok(tape.cross_entropy(logits, &targets.concat())?)
    }

    /// Plain-weight copy for token-by-token decoding.
    pub fn decoder(&self) -> Result<Decoder> {
        let s = &self.store;
        let layers = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Ok(DecoderBlock {
                    ln1: (s.value(b.ln1_gain).clone(), s.value(b.ln1_bias).clone()),
                    attn: LavoLayer::from_store(self.config.layer_config(i), &b.attn, s)?,
                    ln2: (s.value(b.ln2_gain).clone(), s.value(b.ln2_bias).clone()),
                    ff_in: (s.value(b.ff_in).clone(), s.value(b.ff_in_bias).clone()),
                    ff_out: (s.value(b.ff_out).clone(), s.value(b.ff_out_bias).clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let caches = layers.iter().map(|l| l.attn.cache()).collect::<lavo::error::Result<_>>()?;
        Ok(Decoder {
            embed: s.value(self.embed).clone(),
            embed_t: s.value(self.embed).transpose(),
            blocks: layers,
            lnf: (s.value(self.lnf_gain).clone(), s.value(self.lnf_bias).clone()),
            caches,
        })
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln1: (Tensor2D, Tensor2D),
    attn: LavoLayer,
    ln2: (Tensor2D, Tensor2D),
    ff_in: (Tensor2D, Tensor2D),
    ff_out: (Tensor2D, Tensor2D),
}

/// Incremental inference: per-layer constant-size caches.
#[derive(Debug, Clone)]
pub struct Decoder {
    embed: Tensor2D,
    embed_t: Tensor2D,
    blocks: Vec<DecoderBlock>,
    lnf: (Tensor2D, Tensor2D),
    caches: Vec<CausalCache>,
}

fn layer_norm(x: &Tensor2D, (gain, bias): &(Tensor2D, Tensor2D)) -> Tensor2D {
    let (mut y, _) = normalize_rows(x, LN_EPS);
    for (j, v) in y.row_mut(0).iter_mut().enumerate() {
        *v = *v * gain.data()[j] + bias.data()[j];
    }
    y
}

fn affine(x: &Tensor2D, (w, b): &(Tensor2D, Tensor2D)) -> Result<Tensor2D> {
    Ok(x.matmul(w)?.add(b)?)
}

impl Decoder {
    /// Tokens consumed so far.
    pub fn position(&self) -> u64 {
        self.caches.first().map_or(0, |c| c.position())
    }

    /// Total serialized cache size, constant across steps.
    pub fn state_bytes(&self) -> usize {
        self.caches.iter().map(|c| c.to_bytes().len()).sum()
    }

    /// Feeds one token and returns the logits for the next one.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        if token >= self.embed.rows() {
            return Err(crate::LmError::Data(format!("token {token} outside the vocabulary")));
        }
        let mut h = self.embed.slice_rows(token, 1)?;
        for (b, cache) in self.blocks.iter().zip(&mut self.caches) {
            let normed = layer_norm(&h, &b.ln1);
            let attn = b.attn.step(cache, normed.data())?;
            h = h.add(&Tensor2D::row_vector(&attn))?;
            let normed = layer_norm(&h, &b.ln2);
            let hidden = affine(&normed, &b.ff_in)?.map(gelu);
            h = h.add(&affine(&hidden, &b.ff_out)?)?;
        }
        let out = layer_norm(&h, &self.lnf);
        Ok(out.matmul(&self.embed_t)?.into_data())
    }
}
