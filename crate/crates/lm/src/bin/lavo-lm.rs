use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lavo_lm::{eval_ppl, load_checkpoint, save_checkpoint, train, CorpusStream, LmConfig};

#[derive(Debug, Parser)]
#[command(name = "lavo-lm", version, about = "Byte-level LAVO language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on one or more text files and write a checkpoint.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on the held-out part of a corpus.
    Eval(EvalArgs),
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    num_bases: usize,
    #[arg(long, default_value_t = 16)]
    window: usize,
    #[arg(long, default_value_t = 256)]
    ctx: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Drop the relative position bias.
    #[arg(long)]
    no_epe: bool,
    /// Compress raw inputs instead of completed-window local outputs.
    #[arg(long)]
    no_dissect: bool,
    #[arg(long, default_value = "model.lavo")]
    out: PathBuf,
    /// Print the loss every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,4096")]
    eval_lens: Vec<usize>,
    /// Predictions scored per length (at least one segment is always used).
    #[arg(long, default_value_t = 8192)]
    max_tokens: usize,
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Train(a) => {
            let config = LmConfig {
                d_model: a.d_model,
                n_layers: a.layers,
                heads: a.heads,
                num_bases: a.num_bases,
                window: a.window,
                ctx_len: a.ctx,
                use_epe: !a.no_epe,
                use_dissection: !a.no_dissect,
                lr: a.lr,
                steps: a.steps,
                batch: a.batch,
                seed: a.seed,
                ..LmConfig::default()
            };
            let mut corpus = CorpusStream::from_files(&a.corpus, config.seed)?;
            let every = a.log_every.max(1);
            let outcome = train(&config, &mut corpus, |step, loss| {
                if step % every == 0 || step + 1 == config.steps {
                    println!("step {step:>6}  loss {loss:.4}");
                }
            })?;
            save_checkpoint(&outcome.model, &a.out)?;
            println!("wrote {}", a.out.display());
        }
        Command::Eval(a) => {
            let model = load_checkpoint(&a.model)?;
            let corpus = CorpusStream::from_files(&a.corpus, model.config().seed)?;
            for &len in &a.eval_lens {
                let r = eval_ppl(&model, corpus.held_out_bytes(), len, a.max_tokens)?;
                println!(
                    "eval_len {:>6}  segments {:>4}  ppl {:.4}  state {} B",
                    r.eval_len, r.segments, r.perplexity, r.state_bytes
                );
            }
        }
        Command::Selftest { seed } => {
            let mut failed = 0;
            for c in lavo::selftest::run(seed)?.into_iter().chain(lavo_lm::selftest::run(seed)?) {
                println!("{} {}  ({:.3e} <= {:.0e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.measured, c.tolerance);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(format!("{failed} check(s) failed").into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lavo-lm: {e}");
            ExitCode::FAILURE
        }
    }
}
