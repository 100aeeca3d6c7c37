use crate::model::LmModel;
use crate::{LmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eval_len: usize,
    pub segments: usize,
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
    /// Largest per-step decoding state seen, in bytes.
    pub state_bytes: usize,
}

fn nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Perplexity over consecutive non-overlapping segments of `eval_len`
/// predictions, each decoded from a fresh state. At most `max_tokens`
/// predictions are scored, but always at least one segment.
pub fn eval_ppl(model: &LmModel, bytes: &[u8], eval_len: usize, max_tokens: usize) -> Result<EvalReport> {
    if eval_len == 0 {
        return Err(LmError::Config("eval_len must be at least 1".into()));
    }
    let available = bytes.len().saturating_sub(1) / eval_len;
    if available == 0 {
        return Err(LmError::Data(format!("{} bytes cannot hold one segment of {eval_len} predictions", bytes.len())));
    }
    let segments = available.min((max_tokens / eval_len).max(1));
    let mut total = 0.0;
    let mut state_bytes = 0;
    for s in 0..segments {
        let seg = &bytes[s * eval_len..s * eval_len + eval_len + 1];
        let mut dec = model.decoder()?;
        for t in 0..eval_len {
            let logits = dec.step(seg[t] as usize)?;
            total += nll(&logits, seg[t + 1] as usize);
        }
        state_bytes = state_bytes.max(dec.state_bytes());
    }
    let tokens = segments * eval_len;
    let mean_nll = total / tokens as f64;
    Ok(EvalReport { eval_len, segments, tokens, mean_nll, perplexity: mean_nll.exp(), state_bytes })
}
