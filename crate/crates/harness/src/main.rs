use std::path::PathBuf;
use std::process::ExitCode;

use apg_harness::config::{ExperimentConfig, Method, ModelKind};
use apg_harness::eval::{run_eval, EvalSpec};
use apg_harness::train::run_training;
use apg_harness::{corpus, HarnessError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apg", about = "Amortized population Gibbs experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a corpus of instances from the model prior.
    Generate {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        instances: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output stem; `.bin`, `.json` and `.truth.jsonl` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train proposals (and the DMM decoder) from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` overrides, dotted keys for nested tables.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a test corpus.
    Eval {
        /// Checkpoint stem, e.g. `runs/x/ckpt-0020000`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        sweeps: usize,
        #[arg(long)]
        particles: usize,
        #[arg(long)]
        lf: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Corpus stem; defaults to the checkpoint's test corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        dump_latents: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Cmd::Generate { model, instances, n, m, seed, out } => {
            if instances == 0 || n == 0 || m == 0 {
                return Err(HarnessError::Config("instances, n and m must be positive".into()));
            }
            corpus::write(&corpus::generate(model, instances, n, m, seed)?, &out, seed)?;
        }
        Cmd::Train { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let outcome = run_training(&cfg)?;
            println!("{}", outcome.final_checkpoint.display());
        }
        Cmd::Eval { checkpoint, method, sweeps, particles, lf, out, corpus, seed, seeds, instances, dump_latents } => {
            let spec = EvalSpec {
                checkpoint,
                corpus,
                method,
                sweeps,
                particles,
                lf,
                seeds: (seed..seed + seeds).collect(),
                instances,
                out,
                dump_latents,
            };
            let rows = run_eval(&spec)?;
            println!("{} rows", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
