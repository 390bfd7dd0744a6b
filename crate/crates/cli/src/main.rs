use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tokenhance::enhance::ModelKind;
use tokenhance_cli::pipeline::{load_config, Pipeline, Stage};
use tokenhance_cli::report::REPORT_FILE;

/// Token-level speech enhancement experiments on a synthetic corpus.
#[derive(Debug, Parser)]
#[command(name = "tokenhance", version)]
struct Cli {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the clean and noisy corpus.
    Synth,
    /// Train the k-means tokenizer and tokenize every split.
    Tokenize,
    /// Train BPE on clean deduplicated training tokens and encode every split.
    Bpe,
    /// Train one model: t2t, v2t-mlp, v2t-tcn, w2t or asr-backend.
    Train {
        #[arg(value_parser = parse_kind)]
        kind: ModelKind,
    },
    /// Evaluate every system and run the depth sweep.
    Eval,
    /// Re-render the report tables from the evaluation summary.
    Report,
    /// Run every stage in order, skipping those already up to date.
    All,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: tokenhance::Error| e.to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()?;
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mut pipeline = Pipeline::new(cfg)?;
    match cli.command {
        Command::Synth => run(&mut pipeline, Stage::Synth),
        Command::Tokenize => run(&mut pipeline, Stage::Tokenize),
        Command::Bpe => run(&mut pipeline, Stage::Bpe),
        Command::Train { kind } => run(&mut pipeline, Stage::Train(kind)),
        Command::Eval => run(&mut pipeline, Stage::Eval),
        Command::Report => {
            run(&mut pipeline, Stage::Report)?;
            print!(
                "{}",
                std::fs::read_to_string(pipeline.dir.join(REPORT_FILE))?
            );
            Ok(())
        }
        Command::All => pipeline.run_all(),
    }
}

fn run(pipeline: &mut Pipeline, stage: Stage) -> Result<()> {
    pipeline.run(stage)?;
    Ok(())
}
