use super::local::dissect;
use super::{LavoConfig, LavoParams};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{LavoError, Result};
use crate::tensor::Tensor2D;

/// `softmax(scale * q mem^T) mem` on the tape.
fn attend(tape: &mut Tape, q: Var, mem: Var, scale: f64) -> Result<Var> {
    let mt = tape.transpose(mem);
    let scores = tape.matmul(q, mt)?;
    let scores = tape.scale(scores, scale);
    let weights = tape.softmax(scores, None)?;
    tape.matmul(weights, mem)
}

/// Differentiable forward pass over a batch of equal-length sequences
/// stacked row-wise in `x` (`batch * seq_len` rows). Computes the same
/// function as [`LavoLayer::forward`](super::LavoLayer::forward) applied to
/// each sequence.
pub fn forward_tape(
    tape: &mut Tape,
    store: &ParamStore,
    params: &LavoParams,
    config: &LavoConfig,
    x: Var,
    seq_len: usize,
) -> Result<Var> {
    config.validate()?;
    let (rows, cols) = tape.shape(x);
    if rows == 0 || seq_len == 0 {
        return Err(LavoError::EmptyInput);
    }
    if rows % seq_len != 0 || cols != config.d_model {
        return Err(LavoError::Shape { op: "forward_tape input", left: (rows, cols), right: (seq_len, config.d_model) });
    }
    let batch = rows / seq_len;
    let (w, dh, scale) = (config.window, config.d_head(), config.score_scale());
    let specs = dissect(seq_len, w, config.causal)?;

    let wq = tape.param(store, params.wq);
    let wk = tape.param(store, params.wk);
    let wv = tape.param(store, params.wv);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let bases: Vec<Var> = params.bases.iter().map(|&id| tape.param(store, id)).collect();
    let bases_t: Vec<Var> = bases.iter().map(|&b| tape.transpose(b)).collect();
    let pos: Vec<Var> = params.pos.iter().map(|&id| tape.param(store, id)).collect();
    let inv_counts = (!config.use_dissection && config.causal).then(|| {
        let c: Vec<f64> = (1..=seq_len).map(|t| 1.0 / t as f64).collect();
        tape.constant(Tensor2D::column(&c))
    });

    let mut seq_outputs = Vec::with_capacity(batch);
    for s in 0..batch {
        let qs = tape.slice_rows(q, s * seq_len, seq_len)?;
        let ks = tape.slice_rows(k, s * seq_len, seq_len)?;
        let vs = tape.slice_rows(v, s * seq_len, seq_len)?;
        let xs = if config.use_dissection { None } else { Some(tape.slice_rows(x, s * seq_len, seq_len)?) };
        let mut head_outputs = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let qh = tape.slice_cols(qs, h * dh, dh)?;
            let kh = tape.slice_cols(ks, h * dh, dh)?;
            let vh = tape.slice_cols(vs, h * dh, dh)?;
            let mut locals = Vec::with_capacity(specs.len());
            let mut q_wins = Vec::with_capacity(specs.len());
            for spec in &specs {
                let qw = tape.slice_rows(qh, spec.start, spec.len)?;
                let kw = tape.slice_rows(kh, spec.key_start, spec.key_len)?;
                let vw = tape.slice_rows(vh, spec.key_start, spec.key_len)?;
                let kt = tape.transpose(kw);
                let scores = tape.matmul(qw, kt)?;
                let mut scores = tape.scale(scores, scale);
                if config.use_epe {
                    let bias = tape.gather(pos[h], spec.bias_index.clone(), spec.len, spec.key_len)?;
                    scores = tape.add(scores, bias)?;
                }
                let attn = tape.softmax(scores, Some(&spec.mask))?;
                locals.push(tape.matmul(attn, vw)?);
                q_wins.push(qw);
            }

            let fused = if config.use_dissection && config.causal {
                let mut running: Option<Var> = None;
                let mut absorbed = 0usize;
                let mut outs = Vec::with_capacity(specs.len());
                for (i, spec) in specs.iter().enumerate() {
                    let out = match running {
                        None => locals[i],
                        Some(sum) => {
                            let mean = tape.scale(sum, 1.0 / absorbed as f64);
                            let col = tape.transpose(mean);
                            let mem = tape.row_scale(bases[h], col)?;
                            let global = attend(tape, q_wins[i], mem, scale)?;
                            let both = tape.add(locals[i], global)?;
                            tape.scale(both, 0.5)
                        }
                    };
                    outs.push(out);
                    if spec.len == w {
                        let proj = tape.matmul(locals[i], bases_t[h])?;
                        let block = tape.sum_rows(proj);
                        running = Some(match running {
                            None => block,
                            Some(sum) => tape.add(sum, block)?,
                        });
                        absorbed += w;
                    }
                }
                tape.concat_rows(&outs)?
            } else {
                let f_local = tape.concat_rows(&locals)?;
                let global = if config.use_dissection {
                    let proj = tape.matmul(f_local, bases_t[h])?;
                    let mean = tape.mean_rows(proj);
                    let col = tape.transpose(mean);
                    let mem = tape.row_scale(bases[h], col)?;
                    attend(tape, qh, mem, scale)?
                } else {
                    let xh = tape.slice_cols(xs.expect("raw input kept without dissection"), h * dh, dh)?;
                    let proj = tape.matmul(xh, bases_t[h])?;
                    match inv_counts {
                        Some(inv) => {
                            // row t holds H_t, the mean projection of tokens 0..=t
                            let sums = tape.cumsum_rows(proj);
                            let means = tape.row_scale(sums, inv)?;
                            let qb = tape.matmul(qh, bases_t[h])?;
                            let scores = tape.mul(qb, means)?;
                            let scores = tape.scale(scores, scale);
                            let attn = tape.softmax(scores, None)?;
                            let weighted = tape.mul(attn, means)?;
                            tape.matmul(weighted, bases[h])?
                        }
                        None => {
                            let mean = tape.mean_rows(proj);
                            let col = tape.transpose(mean);
                            let mem = tape.row_scale(bases[h], col)?;
                            attend(tape, qh, mem, scale)?
                        }
                    }
                };
                let both = tape.add(f_local, global)?;
                tape.scale(both, 0.5)
            };
            head_outputs.push(fused);
        }
        seq_outputs.push(tape.concat_cols(&head_outputs)?);
    }
    let merged = if batch == 1 { seq_outputs[0] } else { tape.concat_rows(&seq_outputs)? };
    let wo = tape.param(store, params.wo);
    tape.matmul(merged, wo)
}
