use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lavo_bench::alloc::TrackingAllocator;
use lavo_bench::{fit_loglog_slope, run_bench, write_csv, BenchConfig, Mechanism, Mode, Outcome};

#[global_allocator]
static GLOBAL: TrackingAllocator = TrackingAllocator;

/// Time attention mechanisms across sequence lengths and write a CSV.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Args {
    /// Comma-separated subset of lavo, vanilla, naive, local.
    #[arg(long, value_delimiter = ',', default_value = "lavo,vanilla,naive,local")]
    mechanisms: Vec<Mechanism>,
    #[arg(long, default_value = "forward")]
    mode: Mode,
    /// Ascending sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    num_bases: usize,
    #[arg(long, default_value_t = 16)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Record runs estimated to need more than this as out-of-memory failures.
    #[arg(long)]
    mem_limit_mb: Option<u64>,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Exit nonzero if any run failed.
    #[arg(long)]
    strict: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = BenchConfig {
        mechanisms: args.mechanisms,
        mode: args.mode,
        lengths: args.lengths,
        d_model: args.d_model,
        heads: args.heads,
        num_bases: args.num_bases,
        window: args.window,
        reps: args.reps,
        warmup: args.warmup,
        seed: args.seed,
        mem_limit_bytes: args.mem_limit_mb.map(|mb| mb * 1024 * 1024),
    };
    let records = match run_bench(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    };
    for r in &records {
        match &r.outcome {
            Outcome::Ok { wall_ns, peak } => {
                println!("{:8} {:7} n={:<6} {:>12.3} ms  peak {} B", r.mechanism, r.mode, r.n, *wall_ns as f64 / 1e6, peak.bytes())
            }
            Outcome::Failed { reason } => println!("{:8} {:7} n={:<6} FAILED: {reason}", r.mechanism, r.mode, r.n),
        }
    }
    for &mech in &cfg.mechanisms {
        let own: Vec<_> = records.iter().filter(|r| r.mechanism == mech).cloned().collect();
        match fit_loglog_slope(&own) {
            Ok(s) => println!("{mech} log-log slope: {s:.3}"),
            Err(e) => println!("{mech} log-log slope: n/a ({e})"),
        }
    }
    if let Err(e) = write_csv(&records, &args.out) {
        eprintln!("bench: {e}");
        return ExitCode::from(2);
    }
    println!("wrote {}", args.out.display());
    if args.strict && records.iter().any(|r| r.is_failure()) {
        eprintln!("bench: at least one run failed");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
