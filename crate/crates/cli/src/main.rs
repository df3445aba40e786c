use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hypernas::checkpoint::Stage;
use hypernas::config::RunConfig;
use hypernas::harness::{self, RunOptions, StageReport};
use hypernas::search::SearchOptions;

/// Architecture search with a weight-generating hypernetwork.
#[derive(Parser, Debug)]
#[command(name = "hypernas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults to the desk reference config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from this checkpoint instead of the previous stage's file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the original-space supernet and derive the intensive spaces.
    DeriveSpace(Common),
    /// Stage 1: train the generating blocks under random encodings.
    TrainHyper(Common),
    /// Stage 2: gated architecture search.
    Search {
        #[command(flatten)]
        common: Common,
        /// Diagnostic: never update the architecture encodings.
        #[arg(long)]
        freeze_alpha: bool,
    },
    /// Keep the top-T operations per node.
    Discretize(Common),
    /// Score the discretized architecture with generated weights.
    Evaluate(Common),
    /// Count the sub-graphs of a discretized network.
    Complexity { m: usize, k: usize, t: usize, l: usize },
    /// Run every stage in sequence.
    RunAll(Common),
    /// Print the effective configuration as TOML.
    ShowConfig(Common),
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &StageReport) {
    println!("== {} ==> {}", r.stage, r.checkpoint.display());
    print!("{}", r.summary);
}

fn stage(common: &Common, stage: Stage, search: SearchOptions) -> Result<()> {
    let cfg = resolve(common)?;
    let options = RunOptions { resume: common.resume.clone(), search };
    let report = harness::run_stage(&cfg, stage, &options)?;
    print_report(&report);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DeriveSpace(c) => stage(&c, Stage::Derive, SearchOptions::default()),
        Command::TrainHyper(c) => stage(&c, Stage::Train, SearchOptions::default()),
        Command::Search { common, freeze_alpha } => stage(&common, Stage::Search, SearchOptions { freeze_alpha }),
        Command::Discretize(c) => stage(&c, Stage::Discretize, SearchOptions::default()),
        Command::Evaluate(c) => stage(&c, Stage::Evaluate, SearchOptions::default()),
        Command::Complexity { m, k, t, l } => {
            print!("{}", harness::cmd_complexity(m, k, t, l)?);
            Ok(())
        }
        Command::RunAll(c) => {
            let cfg = resolve(&c)?;
            let start = Instant::now();
            let options = RunOptions { resume: c.resume.clone(), search: SearchOptions::default() };
            for r in harness::cmd_run_all(&cfg, &options)? {
                print_report(&r);
            }
            println!("pipeline finished in {:.1} s", start.elapsed().as_secs_f64());
            Ok(())
        }
        Command::ShowConfig(c) => {
            print!("{}", resolve(&c)?.to_toml().context("serializing config")?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already name their cause
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
