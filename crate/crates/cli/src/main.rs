//! `advlab`: train surrogates, run targeted transfer attacks and evaluate them.

mod archive;
mod commands;
mod config;
mod data;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::RunConfig;
use crate::failure::{Classify, Kind};

#[derive(Debug, Parser)]
#[command(name = "advlab", version, about)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, default_value = "advlab.json")]
    config: PathBuf,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (default: the config's `out`, else `out/` next to the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured model (or only the named ones) and write checkpoints.
    Train {
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Attack the evaluation subset and store snapshot archives.
    Attack {
        /// Surrogate model name; repeat for an ensemble.
        #[arg(long = "surrogate", required = true)]
        surrogates: Vec<String>,
        /// A preset or a name from the config's `attacks`.
        #[arg(long)]
        attack: String,
    },
    /// Score every snapshot archive and write the reports.
    Eval,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().kind(Kind::Internal)?;
    }
    let out = match (cli.out, &cfg.out) {
        (Some(o), _) => o,
        (None, Some(o)) => cfg.base_dir.join(o),
        (None, None) => cfg.base_dir.join("out"),
    };
    let run = Run { cfg, out };
    let stdout = &mut std::io::stdout().lock();
    match cli.command {
        Command::Train { models } => commands::train_models(&run, &models, stdout),
        Command::Attack { surrogates, attack } => commands::attack(&run, &surrogates, &attack, stdout),
        Command::Eval => commands::evaluate(&run, stdout),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            let reason: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("error[config]: {}", reason.join(" ").trim_start_matches("error: "));
            return ExitCode::from(Kind::Config.exit_code());
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", failure::render(&e));
            ExitCode::from(failure::classify(&e).exit_code())
        }
    }
}
