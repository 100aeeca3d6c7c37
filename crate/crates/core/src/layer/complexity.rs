use super::LavoConfig;

/// Closed-form multiply-add counts of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    /// Q, K, V and output projections.
    pub projections: u64,
    /// Windowed attention: `w` keys per query, scores plus weighted sum.
    pub local: u64,
    /// Basis projections, memory materialisation and memory attention.
    pub global: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.projections + self.local + self.global
    }
}

/// Operation count of [`LavoLayer::forward`](super::LavoLayer::forward) on
/// `n` tokens: `O((w + r) n)` per head plus the `O(n d^2)` projections.
pub fn complexity_audit(config: &LavoConfig, n: usize) -> FlopCount {
    let (n, d, r, w) = (n as u64, config.d_model as u64, config.num_bases as u64, config.window as u64);
    let heads = config.heads as u64;
    let dh = config.d_head() as u64;
    let projections = 4 * n * d * d;
    let local = 2 * n * w * dh * heads;
    let global = if r == 0 {
        0
    } else if config.use_dissection {
        // project every local output, attend (scores + sum), one memory read per window
        let windows = n.div_ceil(w.max(1));
        heads * (3 * n * r * dh + windows * r * dh)
    } else {
        // one memory read per token
        heads * 4 * n * r * dh
    };
    FlopCount { projections, local, global }
}
