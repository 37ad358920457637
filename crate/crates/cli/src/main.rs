//! `topicssl`: reproducible driver for the self-supervised posterior
//! recovery experiments. One TOML config describes the pipeline; each
//! subcommand runs one stage, and `bench` chains them into the full sweep.
//!
//! Everything is deterministic under the master seed: per-stage seeds are
//! split from it, so `generate`, `train`, and `evaluate` can be re-run
//! independently and byte-identical artifacts come out.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod io;

use config::{ExperimentConfig, Objective};

#[derive(Debug, Parser)]
#[command(
    name = "topicssl",
    version,
    about = "Benchmark driver for self-supervised topic-posterior recovery"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Worker threads for document sampling and oracle evaluation
    /// (default: all cores).
    #[arg(long, global = true, env = "TOPICSSL_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Sample a topic-word matrix and corpus for every alpha-grid cell.
    Generate(CommonArgs),
    /// Train the configured objective, resuming from an existing checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or the ideal predictor) against the posterior
    /// oracle and the assumed-prior baselines.
    Evaluate(EvaluateArgs),
    /// Dump per-document posterior moments with ESS diagnostics for a
    /// corpus file.
    Oracle(OracleArgs),
    /// Full generate -> train -> evaluate sweep with a merged summary.
    Bench(TrainArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override the config's training objective.
    #[arg(long, value_enum)]
    objective: Option<Objective>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override the config's training objective (selects the checkpoint
    /// format).
    #[arg(long, value_enum)]
    objective: Option<Objective>,
    /// Evaluate the oracle-backed ideal predictor instead of a checkpoint.
    #[arg(long)]
    ideal: bool,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Corpus file written by `generate`.
    #[arg(long)]
    docs: PathBuf,
}

impl CommonArgs {
    /// Loads the config and applies the `--seed`/`--out` overrides.
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        let out = cfg.out_dir.clone();
        Ok((cfg, out))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()
        {
            eprintln!("error: configuring {threads} worker threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Generate(args) => {
            let (cfg, out) = args.load()?;
            commands::generate::run(&cfg, &out)?;
            Ok(0)
        }
        Cmd::Train(args) => {
            let (cfg, out) = args.common.load()?;
            let objective = args.objective.unwrap_or(cfg.training.objective);
            commands::train::run(&cfg, &out, objective)
        }
        Cmd::Evaluate(args) => {
            let (cfg, out) = args.common.load()?;
            let objective = args.objective.unwrap_or(cfg.training.objective);
            commands::evaluate::run(&cfg, &out, args.ideal, objective)?;
            Ok(0)
        }
        Cmd::Oracle(args) => {
            let (cfg, out) = args.common.load()?;
            commands::oracle::run(&cfg, &out, &args.docs)?;
            Ok(0)
        }
        Cmd::Bench(args) => {
            let (cfg, out) = args.common.load()?;
            let objective = args.objective.unwrap_or(cfg.training.objective);
            commands::bench::run(&cfg, &out, objective)
        }
    }
}
