//! `mobirl`: suites, splits, worker pools, training, evaluation, adaptation
//! and profiling from one binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod manifest;
mod workers;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};
use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "mobirl", version, about = "Multi-turn GUI agent RL: benchmark splits, simulator workers, GRPO/PPO training and evaluation")]
struct Cli {
    /// TOML run configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.total_steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run directory for every artifact of this command.
    #[arg(long)]
    pub out: PathBuf,
    /// Suite file from `gen-suite`; built from the config when absent.
    #[arg(long)]
    pub suite: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the mini-app suite: catalog, environment config and scripted solutions.
    GenSuite(#[command(flatten)] Common),
    /// Generate benchmark splits with their statistics table.
    GenSplit(commands::GenSplitArgs),
    /// Run a supervised pool of HTTP workers until interrupted.
    Serve(commands::ServeArgs),
    /// Train a policy with GRPO or PPO.
    Train(commands::TrainArgs),
    /// Evaluate checkpoints, compare regime curves or run the reward-source experiment.
    Eval(commands::EvalArgs),
    /// Few-shot adaptation on unseen apps, evaluated against no adaptation.
    Adapt(commands::AdaptArgs),
    /// Rollout throughput across scheduling modes and pool sizes.
    Profile(commands::ProfileArgs),
    /// Check a split for leaks and every context for solvability.
    Verify(commands::VerifyArgs),
    /// One HTTP worker (started by the pool).
    #[command(hide = true)]
    Worker {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

pub enum Failure {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSuite(_) => "gen-suite",
            Command::GenSplit(_) => "gen-split",
            Command::Serve(_) => "serve",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Adapt(_) => "adapt",
            Command::Profile(_) => "profile",
            Command::Verify(_) => "verify",
            Command::Worker { .. } => "worker",
        }
    }

    fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::GenSuite(c) => Some(&c.out),
            Command::GenSplit(a) => Some(&a.common.out),
            Command::Serve(a) => Some(&a.common.out),
            Command::Train(a) => Some(&a.common.out),
            Command::Eval(a) => Some(&a.common.out),
            Command::Adapt(a) => Some(&a.common.out),
            Command::Profile(a) => Some(&a.common.out),
            Command::Verify(a) => Some(&a.common.out),
            Command::Worker { .. } => None,
        }
    }
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<(), Failure> {
    match cmd {
        Command::GenSuite(c) => commands::gen_suite(c, cfg),
        Command::GenSplit(a) => commands::gen_split(a, cfg),
        Command::Serve(a) => commands::serve(a, cfg),
        Command::Train(a) => commands::train(a, cfg),
        Command::Eval(a) => commands::eval(a, cfg),
        Command::Adapt(a) => commands::adapt(a, cfg),
        Command::Profile(a) => commands::profile(a, cfg),
        Command::Verify(a) => commands::verify(a, cfg),
        Command::Worker { .. } => unreachable!("handled before config loading"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Worker { args } = &cli.command {
        return match mobirl_wire::worker_main(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("mobirl worker: {e}");
                ExitCode::from(2)
            }
        };
    }
    let cfg = match RunConfig::load(cli.config.as_deref(), &cli.sets) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let out = cli.command.out().expect("every artifact command has --out").clone();
    let mut manifest = RunManifest::start(cli.command.name(), std::env::args().skip(1).collect(), &cfg, &out);
    if let Err(e) = manifest.write() {
        eprintln!("error: cannot write manifest in {}: {e}", out.display());
        return ExitCode::from(1);
    }
    let result = dispatch(&cli.command, &cfg);
    let code = match &result {
        Ok(()) => 0,
        Err(f) => f.code(),
    };
    match result {
        Err(Failure::Config(e)) => eprintln!("{e}"),
        Err(Failure::Runtime(e)) => eprintln!("error: {e:#}"),
        Ok(()) => {}
    }
    if let Err(e) = manifest.finish(i32::from(code)) {
        eprintln!("error: cannot update manifest: {e}");
    }
    ExitCode::from(code)
}
