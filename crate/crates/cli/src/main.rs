//! `uragate`: generate the corpus, train both stages, evaluate, probe and
//! estimate FLOPs.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration, 3
//! missing checkpoint, 4 training divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use uragate_core::engine::PruningMode;
use uragate_core::Error;

use commands::Context;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "uragate", version, about = "Unified retrieval and generation over multi-page documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[arg(long = "top-k", global = true)]
    top_k: Option<usize>,
    #[arg(long = "retrieval-layer", global = true)]
    retrieval_layer: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write the synthetic corpus as JSONL.
    Gen,
    /// Stage 1: train the retrieval module on the frozen backbone.
    Pretrain,
    /// Stage 2: joint training of backbone and module adapters.
    Finetune,
    /// Answer the test split and write per-question metrics.
    Eval,
    /// Layer-wise attention and embedding probes.
    Analyze,
    /// Analytical FLOPs sweeps for the toy model and the full-scale preset.
    Flops,
}

#[derive(ValueEnum, Clone, Copy)]
enum Mode {
    Baseline,
    Urag,
}

fn build_context(cli: &Cli) -> Result<Context, Error> {
    let config_path = cli.config.as_ref().ok_or_else(|| Error::Config {
        field: "--config".into(),
        reason: "a configuration file is required".into(),
    })?;
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.engine.pruning_mode = match mode {
            Mode::Baseline => PruningMode::Baseline,
            Mode::Urag => PruningMode::Urag,
        };
    }
    if let Some(k) = cli.top_k {
        cfg.engine.model.top_k = k;
    }
    if let Some(r) = cli.retrieval_layer {
        cfg.engine.model.retrieval_layer = r;
    }
    cfg.validate()?;
    if cli.workers == Some(0) {
        return Err(Error::Config { field: "--workers".into(), reason: "must be positive".into() });
    }
    std::fs::create_dir_all(&cli.out)?;
    Ok(Context { cfg, out: cli.out.clone() })
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut ctx = build_context(cli)?;
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Gen => commands::gen(&ctx),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::Finetune => commands::finetune(&mut ctx),
        Command::Eval => commands::eval(&mut ctx),
        Command::Analyze => commands::analyze(&mut ctx),
        Command::Flops => commands::flops(&ctx),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingCheckpoint(_) => 3,
        Error::Divergence { .. } | Error::NonFiniteGradient(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("uragate: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
