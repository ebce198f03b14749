use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use genrec::commands;
use genrec::config::{split_overrides, RunConfig};
use genrec::error::{Error, Result};
use genrec_core::trainer::Strategy;
use serde::Serialize;

/// Generative recommendation with a jointly learned item tokenizer.
///
/// Any configuration value can be overridden with `--section.key value`,
/// e.g. `--train.lambda 0.25`.
#[derive(Parser, Debug)]
#[command(name = "genrec", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic interactions/embeddings corpus to the data paths.
    Synth,
    /// k-means initialize and pretrain the tokenizer.
    Pretrain {
        /// Continue from the existing tokenizer checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the recommender (and tokenizer, depending on the strategy).
    Train {
        /// bloger, bloger-no-gs, joint, joint-gs or fixed.
        #[arg(long)]
        strategy: Option<String>,
        /// Tokenizer checkpoint; defaults to the one written by `pretrain`.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// No per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint directory on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time fixed and bloger training epochs and evaluation.
    Bench,
    /// Print the resolved configuration.
    Config,
}

fn print(v: &impl Serialize) -> Result<()> {
    println!("{}", commands::to_json(v)?);
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::Synth => print(&commands::synth(&cfg)?),
        Command::Pretrain { resume } => print(&commands::pretrain(&cfg, resume)?),
        Command::Train { strategy, tokenizer, quiet } => {
            if let Some(s) = strategy {
                cfg.train.strategy = Strategy::parse(&s)?;
                cfg.validate()?;
            }
            print(&commands::train(&cfg, tokenizer.as_deref(), quiet)?)
        }
        Command::Eval { checkpoint } => print(&commands::eval(&cfg, &checkpoint)?),
        Command::Bench => print(&commands::bench(&cfg)?),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
