use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::{Overrides, RunConfig};
use rsd_core::verify::Scope;

/// Reward-guided speculative decoding experiments.
#[derive(Debug, Parser)]
#[command(name = "rsd", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch commands; overrides the config file.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Output file; overrides the config file.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode one prompt and print the completion.
    Decode {
        /// Prompt text.
        prompt: String,
    },
    /// Run the configured method over every dataset record.
    Bench,
    /// Run the randomized property campaigns.
    Verify {
        #[arg(long, value_enum, default_value_t = ScopeArg::All)]
        scope: ScopeArg,
        /// Instances per campaign (per variant for prop2). Defaults to
        /// 500 / 1000 / 200 / 50 for prop1 / prop2 / prop3 / sd_unbiased.
        #[arg(long)]
        instances: Option<usize>,
        /// Monte-Carlo trials per sampled instance.
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
    },
    /// Sweep the binary-step threshold over the dataset.
    Sweep {
        /// Comma-separated thresholds, e.g. "0,0.5,0.7,1.0".
        #[arg(long, default_value = "0,0.5,0.7,1.0")]
        deltas: String,
        /// Trajectories per prompt and threshold.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ScopeArg {
    Prop1,
    Prop2,
    Prop3,
    SdUnbiased,
    All,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Prop1 => Scope::Prop1,
            ScopeArg::Prop2 => Scope::Prop2,
            ScopeArg::Prop3 => Scope::Prop3,
            ScopeArg::SdUnbiased => Scope::SdUnbiased,
            ScopeArg::All => Scope::All,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .context("this command needs --config <file>")?;
    let overrides = Overrides {
        seed: cli.seed,
        concurrency: cli.concurrency,
        output: cli.output.clone(),
    };
    RunConfig::load(path, &overrides)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Decode { prompt } => commands::decode(&load_config(cli)?, prompt),
        Command::Bench => commands::bench(&load_config(cli)?),
        Command::Verify {
            scope,
            instances,
            trials,
        } => commands::verify(
            (*scope).into(),
            *instances,
            *trials,
            cli.seed.unwrap_or(0),
            cli.output.as_deref(),
        ),
        Command::Sweep { deltas, repeats } => {
            let deltas = commands::parse_deltas(deltas)?;
            commands::sweep(&load_config(cli)?, &deltas, *repeats)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
