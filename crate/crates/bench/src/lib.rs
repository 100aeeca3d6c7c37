//! Wall-clock and allocation measurements of attention mechanisms versus
//! sequence length, in 32-bit floats.

pub mod alloc;
mod mechanism;

use std::hint::black_box;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lavo::layer::{LavoConfig, LavoLayer};
use lavo::rng::RngState;
use lavo::tensor::{Tensor, Tensor2D};

pub use mechanism::{bench_layer, estimate_bytes, run_forward, Decoder, Mechanism, Mode};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("slope fit needs at least 3 distinct lengths, got {0}")]
    InsufficientData(usize),
    #[error("records mix mechanisms or modes")]
    MixedRecords,
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: malformed row: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Lavo(#[from] lavo::error::LavoError),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub mechanisms: Vec<Mechanism>,
    pub mode: Mode,
    /// Ascending.
    pub lengths: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub num_bases: usize,
    pub window: usize,
    /// At least 3.
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Runs whose estimated footprint exceeds this are recorded as failures.
    pub mem_limit_bytes: Option<u64>,
}

impl BenchConfig {
    pub fn new(mechanisms: Vec<Mechanism>, mode: Mode, lengths: Vec<usize>) -> Self {
        Self {
            mechanisms,
            mode,
            lengths,
            d_model: 64,
            heads: 2,
            num_bases: 16,
            window: 16,
            reps: 5,
            warmup: 1,
            seed: 42,
            mem_limit_bytes: None,
        }
    }

    pub fn layer_config(&self) -> LavoConfig {
        LavoConfig::new(self.d_model, self.heads, self.num_bases, self.window).with_seed(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(BenchError::Config(format!("reps must be at least 3, got {}", self.reps)));
        }
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(BenchError::Config("lengths must be non-empty and positive".into()));
        }
        if self.lengths.windows(2).any(|p| p[0] >= p[1]) {
            return Err(BenchError::Config("lengths must be strictly ascending".into()));
        }
        if self.mechanisms.is_empty() {
            return Err(BenchError::Config("no mechanisms selected".into()));
        }
        self.layer_config().validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeakBytes {
    /// From the counting allocator.
    Measured(u64),
    /// From [`estimate_bytes`].
    Estimated(u64),
}

impl PeakBytes {
    pub fn bytes(self) -> u64 {
        match self {
            PeakBytes::Measured(b) | PeakBytes::Estimated(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ok { wall_ns: u64, peak: PeakBytes },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub mode: Mode,
    pub n: usize,
    pub d_model: usize,
    pub heads: usize,
    pub num_bases: usize,
    pub window: usize,
    pub seed: u64,
    pub outcome: Outcome,
}

impl BenchRecord {
    pub fn wall_ns(&self) -> Option<u64> {
        match self.outcome {
            Outcome::Ok { wall_ns, .. } => Some(wall_ns),
            Outcome::Failed { .. } => None,
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self.outcome, Outcome::Failed { .. })
    }
}

/// Input sequence for a given seed: standard normal entries, drawn in
/// 64-bit and rounded.
pub fn bench_input(seed: u64, n: usize, d_model: usize) -> Tensor<f32> {
    Tensor2D::gaussian(&mut RngState::new(seed), n, d_model).cast()
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

fn run_once(mech: Mechanism, mode: Mode, layer: &LavoLayer<f32>, x: &Tensor<f32>) -> lavo::error::Result<()> {
    match mode {
        Mode::Forward => {
            black_box(run_forward(mech, layer, x)?);
        }
        Mode::Decode => {
            let mut dec = Decoder::new(mech, layer)?;
            for t in 0..x.rows() {
                black_box(dec.step(x.row(t))?);
            }
        }
    }
    Ok(())
}

fn measure(cfg: &BenchConfig, mech: Mechanism, layer: &LavoLayer<f32>, x: &Tensor<f32>) -> Outcome {
    let estimate = estimate_bytes(mech, cfg.mode, layer.config(), x.rows());
    if let Some(limit) = cfg.mem_limit_bytes {
        if estimate > limit {
            return Outcome::Failed { reason: format!("out of memory: needs ~{estimate} bytes, limit {limit}") };
        }
    }
    let attempt = catch_unwind(AssertUnwindSafe(|| -> lavo::error::Result<Outcome> {
        for _ in 0..cfg.warmup {
            run_once(mech, cfg.mode, layer, x)?;
        }
        let mut times = Vec::with_capacity(cfg.reps);
        let mut peak = 0usize;
        for _ in 0..cfg.reps {
            let base = alloc::reset_peak();
            let start = Instant::now();
            run_once(mech, cfg.mode, layer, x)?;
            times.push((start.elapsed().as_nanos() as u64).max(1));
            peak = peak.max(alloc::peak().saturating_sub(base));
        }
        let peak = if alloc::is_active() { PeakBytes::Measured(peak as u64) } else { PeakBytes::Estimated(estimate) };
        Ok(Outcome::Ok { wall_ns: median(times), peak })
    }));
    match attempt {
        Ok(Ok(outcome)) => outcome,
        Ok(Err(e)) => Outcome::Failed { reason: e.to_string() },
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Outcome::Failed { reason: msg }
        }
    }
}

/// Times every mechanism at every length: median of `reps` runs after
/// `warmup` runs. Decode mode times the whole step loop over `n` tokens.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let layer = bench_layer(&cfg.layer_config())?;
    let mut records = Vec::new();
    for &mech in &cfg.mechanisms {
        for &n in &cfg.lengths {
            let x = bench_input(cfg.seed, n, cfg.d_model);
            records.push(BenchRecord {
                mechanism: mech,
                mode: cfg.mode,
                n,
                d_model: cfg.d_model,
                heads: cfg.heads,
                num_bases: cfg.num_bases,
                window: cfg.window,
                seed: cfg.seed,
                outcome: measure(cfg, mech, &layer, &x),
            });
        }
    }
    Ok(records)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(BenchError::InsufficientData(xs.len()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Slope of wall time versus `n` over the successful records of one
/// mechanism and mode.
pub fn fit_loglog_slope(records: &[BenchRecord]) -> Result<f64> {
    if let Some(first) = records.first() {
        if records.iter().any(|r| r.mechanism != first.mechanism || r.mode != first.mode) {
            return Err(BenchError::MixedRecords);
        }
    }
    let points: Vec<(f64, f64)> =
        records.iter().filter_map(|r| r.wall_ns().map(|t| (r.n as f64, t as f64))).collect();
    loglog_slope(&points)
}

pub const CSV_HEADER: [&str; 10] =
    ["mechanism", "mode", "n", "d_model", "heads", "num_bases", "window", "seed", "wall_ns", "peak_bytes"];

pub fn write_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let csv_err = |source| BenchError::Csv { path: path.to_path_buf(), source };
    let file = std::fs::File::create(path).map_err(|source| BenchError::Io { path: path.to_path_buf(), source })?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        let (wall, peak) = match r.outcome {
            Outcome::Ok { wall_ns, peak: PeakBytes::Measured(b) } => (wall_ns.to_string(), b.to_string()),
            Outcome::Ok { wall_ns, peak: PeakBytes::Estimated(b) } => (wall_ns.to_string(), format!("est:{b}")),
            Outcome::Failed { .. } => ("fail".to_string(), "fail".to_string()),
        };
        w.write_record([
            r.mechanism.name().to_string(),
            r.mode.name().to_string(),
            r.n.to_string(),
            r.d_model.to_string(),
            r.heads.to_string(),
            r.num_bases.to_string(),
            r.window.to_string(),
            r.seed.to_string(),
            wall,
            peak,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| BenchError::Io { path: path.to_path_buf(), source })
}

/// Parses a file written by [`write_csv`]. Failure reasons are not stored
/// in the file and come back as `"fail"`.
pub fn read_csv(path: &Path) -> Result<Vec<BenchRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| BenchError::Csv { path: path.to_path_buf(), source })?;
    let bad = |reason: String| BenchError::Parse { path: path.to_path_buf(), reason };
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|source| BenchError::Csv { path: path.to_path_buf(), source })?;
        if row.len() != CSV_HEADER.len() {
            return Err(bad(format!("expected {} fields, got {}", CSV_HEADER.len(), row.len())));
        }
        let num = |i: usize| row[i].parse::<u64>().map_err(|e| bad(format!("{}: {e}", CSV_HEADER[i])));
        let outcome = if &row[8] == "fail" {
            Outcome::Failed { reason: "fail".into() }
        } else {
            let peak = match row[9].strip_prefix("est:") {
                Some(b) => PeakBytes::Estimated(b.parse().map_err(|e| bad(format!("peak_bytes: {e}")))?),
                None => PeakBytes::Measured(num(9)?),
            };
            Outcome::Ok { wall_ns: num(8)?, peak }
        };
        out.push(BenchRecord {
            mechanism: row[0].parse().map_err(bad)?,
            mode: row[1].parse().map_err(bad)?,
            n: num(2)? as usize,
            d_model: num(3)? as usize,
            heads: num(4)? as usize,
            num_bases: num(5)? as usize,
            window: num(6)? as usize,
            seed: num(7)?,
            outcome,
        });
    }
    Ok(out)
}

/// Median wall time per decoding step over positions `t..t + span`, for
/// each `t` in `starts`, from caches already advanced to `t`. Trials are
/// interleaved across starts after one warm-up round so every start sees
/// the same machine state.
pub fn decode_step_ns(layer: &LavoLayer<f32>, x: &Tensor<f32>, starts: &[usize], span: usize, trials: usize) -> Result<Vec<f64>> {
    if starts.iter().any(|&t| t + span > x.rows()) || span == 0 || trials == 0 {
        return Err(BenchError::Config(format!("need t + span <= {} with span, trials > 0", x.rows())));
    }
    let mut caches = Vec::with_capacity(starts.len());
    for &t in starts {
        let mut cache = layer.cache()?;
        for i in 0..t {
            layer.step(&mut cache, x.row(i))?;
        }
        caches.push(cache);
    }
    let mut times = vec![Vec::with_capacity(trials); starts.len()];
    for round in 0..=trials {
        for (k, (&t, cache)) in starts.iter().zip(&caches).enumerate() {
            let mut c = cache.clone();
            let start = Instant::now();
            for i in t..t + span {
                black_box(layer.step(&mut c, x.row(i))?);
            }
            if round > 0 {
                times[k].push(start.elapsed().as_nanos() as u64);
            }
        }
    }
    Ok(times.into_iter().map(|t| median(t) as f64 / span as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_laws() {
        let ns = [256.0, 512.0, 1024.0, 2048.0];
        let lin: Vec<_> = ns.iter().map(|&n| (n, 3.0 * n)).collect();
        let quad: Vec<_> = ns.iter().map(|&n| (n, 0.5 * n * n)).collect();
        assert!((loglog_slope(&lin).unwrap() - 1.0).abs() < 1e-9);
        assert!((loglog_slope(&quad).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn slope_of_perturbed_linear() {
        let ns = [256.0, 512.0, 1024.0, 2048.0, 4096.0];
        let mut rng = RngState::new(5);
        for _ in 0..200 {
            let pts: Vec<_> = ns.iter().map(|&n| (n, n * (1.0 + 0.1 * (rng.uniform() - 0.5)))).collect();
            let s = loglog_slope(&pts).unwrap();
            assert!((0.9..=1.1).contains(&s), "{s}");
        }
    }

    #[test]
    fn slope_needs_three_lengths() {
        assert!(matches!(loglog_slope(&[(1.0, 1.0), (2.0, 2.0), (2.0, 2.1)]), Err(BenchError::InsufficientData(2))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = BenchConfig::new(vec![Mechanism::Lavo], Mode::Forward, vec![64, 128, 256]);
        assert!(cfg.validate().is_ok());
        cfg.reps = 2;
        assert!(cfg.validate().is_err());
        cfg.reps = 3;
        cfg.lengths = vec![128, 64];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn inputs_are_deterministic() {
        assert_eq!(bench_input(42, 16, 8), bench_input(42, 16, 8));
        assert_ne!(bench_input(42, 16, 8), bench_input(43, 16, 8));
    }
}
