//! The `ckg` command-line driver.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{ExplainArgs, SweepParam, SynthKind, TrainArgs};
use crate::config::{BackendKind, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "ckg",
    version,
    about = "Knowledge-graph recommender with LLM-assisted augmentation"
)]
pub struct Cli {
    /// Log progress (repeat for more detail). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Flat TOML run configuration.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Directory for every artifact.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate the dataset; print its statistics.
    Ingest(Common),
    /// Build the add/delete pools with an LLM backend.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
    },
    /// Train and write a checkpoint plus per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train with empty pools.
        #[arg(long)]
        no_llm: bool,
        /// Pool file (default: OUT/pools.jsonl).
        #[arg(long)]
        pools: Option<PathBuf>,
        /// Write each epoch's view graphs and interaction masks.
        #[arg(long)]
        dump_views: bool,
    },
    /// Full-ranking Recall@k and NDCG@k of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplitArg,
    },
    /// Explain why an item suits a user.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: String,
        #[arg(long)]
        item: String,
        /// Confidence threshold for admitting added triplets.
        #[arg(long, allow_hyphen_values = true)]
        mu: Option<f64>,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pools: Option<PathBuf>,
    },
    /// Train and test once per value of an augmentation ratio.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values, e.g. 0,0.5,1.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long)]
        no_llm: bool,
    },
    /// Write a seeded synthetic dataset and a config for it.
    Synth {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "toy")]
        kind: SynthKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum EvalSplitArg {
    Validation,
    Test,
}

fn print_json(v: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("json serializes")
    );
}

/// Runs one command, printing its result to stdout.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(c) => {
            let cfg = RunConfig::from_path(&c.config)?;
            let report = commands::ingest(&cfg, &c.out)?;
            print!("{}", commands::summary_table(&report));
        }
        Command::Augment { common, backend } => {
            let mut cfg = RunConfig::from_path(&common.config)?;
            if let Some(b) = backend {
                cfg.run.backend = b;
            }
            cfg.validate()?;
            print_json(&commands::augment(&cfg, &common.out)?);
        }
        Command::Train {
            common,
            no_llm,
            pools,
            dump_views,
        } => {
            let cfg = RunConfig::from_path(&common.config)?;
            print_json(&commands::train(
                &cfg,
                &common.out,
                &TrainArgs {
                    no_llm,
                    pools,
                    dump_views,
                },
            )?);
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = RunConfig::from_path(&common.config)?;
            let split = match split {
                EvalSplitArg::Validation => ckg::eval::EvalSplit::Validation,
                EvalSplitArg::Test => ckg::eval::EvalSplit::Test,
            };
            print_json(&commands::eval(
                &cfg,
                &common.out,
                checkpoint.as_deref(),
                split,
            )?);
        }
        Command::Explain {
            common,
            user,
            item,
            mu,
            backend,
            checkpoint,
            pools,
        } => {
            let mut cfg = RunConfig::from_path(&common.config)?;
            if let Some(m) = mu {
                cfg.run.mu = m;
            }
            if let Some(b) = backend {
                cfg.run.backend = b;
            }
            cfg.validate()?;
            print_json(&commands::explain(
                &cfg,
                &common.out,
                &ExplainArgs {
                    user,
                    item,
                    checkpoint,
                    pools,
                },
            )?);
        }
        Command::Sweep {
            common,
            param,
            grid,
            no_llm,
        } => {
            let cfg = RunConfig::from_path(&common.config)?;
            print!(
                "{}",
                commands::sweep(&cfg, &common.out, param, &grid, no_llm)?
            );
        }
        Command::Synth { out, kind, seed } => {
            let path = commands::synth(&out, kind, seed)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
