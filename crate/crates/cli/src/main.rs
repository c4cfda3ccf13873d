//! `pumpsched`: simulate, train, evaluate, manage datasets and serve
//! interactive sessions.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pumpsched_core::env::RewardVariant;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-", env!("PUMPSCHED_GIT_DESCRIBE"));

#[derive(Debug, Parser)]
#[command(name = "pumpsched", version = VERSION, about = "Pump scheduling testbed")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON configuration file; every field is optional.
    #[arg(long, global = true, env = "PUMPSCHED_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for demand synthesis and training; defaults to `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Reward variant, overriding the configuration.
    #[arg(long, global = true, value_enum)]
    pub reward: Option<RewardArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RewardArg {
    V1,
    V2,
}

impl From<RewardArg> for RewardVariant {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::V1 => RewardVariant::V1,
            RewardArg::V2 => RewardVariant::V2,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a schedule through the simulator and report on it.
    Simulate(SimulateArgs),
    /// Learn a policy offline from an operation log.
    Train(TrainArgs),
    /// Roll out a trained policy and compare it with a baseline.
    Eval(EvalArgs),
    /// Validate, synthesize or slice operation logs.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Host interactive sessions over HTTP and WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    Rule,
    Nop,
    Np1,
    Np2,
    Np3,
    Np4,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Days of synthetic demand.
    #[arg(long, default_value_t = 1)]
    pub days: usize,
    /// Minutes to simulate; defaults to the whole demand trace.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Take the demand from an operation log instead of synthesizing it.
    #[arg(long, conflicts_with = "replay")]
    pub demand: Option<PathBuf>,
    /// Fixed schedule used when neither a checkpoint nor a replay is given.
    #[arg(long, value_enum, default_value = "rule")]
    pub policy: Policy,
    /// Operate greedily with a trained checkpoint.
    #[arg(long, conflicts_with = "replay")]
    pub checkpoint: Option<PathBuf>,
    /// Replay the operators' actions recorded in a log, over its demand and
    /// from its first tank level.
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Operation log to learn from.
    #[arg(long)]
    pub data: PathBuf,
    /// Gradient updates; defaults to `pipeline.train_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Ensemble size, overriding `train.k`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Simulator steps of ε-greedy fine-tuning after offline training.
    #[arg(long, default_value_t = 0)]
    pub online_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Days of synthetic demand.
    #[arg(long, default_value_t = 1)]
    pub days: usize,
    /// Minutes to roll out; defaults to the whole demand trace.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Take the demand from an operation log instead of synthesizing it.
    #[arg(long)]
    pub demand: Option<PathBuf>,
    /// Compare against this log's recorded operation instead of the rule
    /// operator on the same demand.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Check an operation log and summarize it.
    Validate {
        path: PathBuf,
    },
    /// Generate a rule-operated synthetic log.
    Synth {
        #[arg(long, default_value_t = 1)]
        days: usize,
    },
    /// Cut a log into day-long episodes.
    Slice {
        path: PathBuf,
        /// Episode start, minutes past midnight.
        #[arg(long, default_value_t = 0)]
        offset: i64,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.kind as u8)
        }
    }
}
