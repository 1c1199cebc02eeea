//! `agr`: prepare data, train both models, evaluate refinement and run the
//! exact oracles. Thread count follows `RAYON_NUM_THREADS`.

use std::path::PathBuf;
use std::process::ExitCode;

use agr_lab::config::{Config, Overrides};
use agr_lab::permute::Objective;
use agr_lab::pipeline::{self, Outcome};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(version, about = "Next-token prediction refined by a second-to-last-token model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true, env = "AGR_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Candidate count.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Boost factor.
    #[arg(long, global = true)]
    w: Option<f64>,
    /// Permutation block length.
    #[arg(long, global = true)]
    l: Option<usize>,
    /// Samples per evaluation run.
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize text into a dataset file.
    Prepare,
    /// Train the next-token model, the refiner, or both.
    Train {
        #[arg(long, default_value = "both", value_parser = ["next", "second", "both"])]
        model: String,
    },
    /// Repeated sampled evaluation with a results table.
    Eval,
    /// One sampled run of refinement on a split.
    Agr {
        /// Also write one row per sample.
        #[arg(long)]
        traces: bool,
    },
    /// Exact computations on synthetic Markov sources.
    Oracle,
    /// Quick internal consistency checks.
    Selftest,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let c = cli.common;
    let mut cfg = match &c.config {
        Some(p) => Config::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => Config::default(),
    };
    let overrides = Overrides { seed: c.seed, k: c.k, w: c.w, l: c.l, samples: c.samples, runs: c.runs, out: c.out }.apply(&mut cfg);
    let outcome = match cli.command {
        Command::Prepare => pipeline::prepare(&cfg, &overrides)?,
        Command::Train { model } => {
            let objectives = match model.as_str() {
                "next" => vec![Objective::NextToken],
                "second" => vec![Objective::SecondToLast],
                _ => vec![Objective::NextToken, Objective::SecondToLast],
            };
            pipeline::train(&cfg, &objectives, &overrides)?
        }
        Command::Eval => pipeline::eval(&cfg, &overrides)?,
        Command::Agr { traces } => {
            cfg.refine.traces |= traces;
            pipeline::agr(&cfg, &overrides)?
        }
        Command::Oracle => pipeline::oracle(&cfg, &overrides)?,
        Command::Selftest => pipeline::selftest(),
    };
    Ok(outcome)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            if !outcome.summary.ends_with('\n') {
                println!();
            }
            if let Some(m) = outcome.manifest {
                println!("manifest: {}", m.display());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
