//! `clonebench` command-line entry point.

mod commands;
mod config;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "clonebench", version, about = "Behavioural cloning toolkit for real-time games")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve a toy game over the wire protocol.
    ServeEnv(ServeArgs),
    /// Connect to a server and archive every episode.
    Record(RecordArgs),
    /// Summarize a dataset directory.
    Stats(StatsArgs),
    /// Keep the top-scoring fraction of a dataset.
    Filter(FilterArgs),
    /// Re-pair frames with actions shifted by a delay.
    Shift(ShiftArgs),
    /// Train a policy on a dataset.
    Train(TrainArgs),
    /// Play a served game with a trained model.
    Play(PlayArgs),
    /// Roll out a trained model in a toy game.
    Evaluate(EvaluateArgs),
    /// Multi-seed experiments.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compute random and expert reference scores.
    Baseline(BaselineArgs),
    /// Generate scripted-expert demonstrations.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GameArg {
    Dodger,
    Collector,
}

impl GameArg {
    pub fn id(self) -> &'static str {
        match self {
            GameArg::Dodger => "dodger",
            GameArg::Collector => "collector",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DriverArg {
    /// Actions come from the client's EMULATE messages.
    None,
    /// The scripted expert plays locally.
    Expert,
    /// Uniformly random local play.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Nature,
    Compact,
}

/// Environment flags shared by several commands.
#[derive(Debug, Clone, Args)]
pub struct EnvArgs {
    #[arg(long, value_enum)]
    pub game: Option<GameArg>,
    /// Maximum ticks per episode.
    #[arg(long)]
    pub max_ticks: Option<u32>,
    #[arg(long)]
    pub tick_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: SocketAddr,
    #[arg(long)]
    pub episodes: Option<u32>,
    /// Wait for the client's action every tick instead of running on the clock.
    #[arg(long)]
    pub lockstep: bool,
    #[arg(long, value_enum, default_value_t = DriverArg::None)]
    pub driver: DriverArg,
    /// Reaction delay of the expert driver, in ticks.
    #[arg(long, default_value_t = 0)]
    pub expert_delay: usize,
    /// Probability that the local driver's action is replaced by a random one.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    #[arg(long)]
    pub connect: SocketAddr,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "player")]
    pub player: String,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Fraction of episodes to keep, in (0, 1].
    #[arg(long)]
    pub keep_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Frame i is paired with action i + delay.
    #[arg(long, allow_hyphen_values = true)]
    pub delay: i64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training flags; unset flags fall back to the config file, then defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    /// Model input size as WxH, or `native`.
    #[arg(long)]
    pub resize: Option<String>,
    /// Merge each frame with its predecessor (pixel-wise max).
    #[arg(long)]
    pub flicker_merge: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub delay: Option<i64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlayArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub connect: SocketAddr,
    /// Take the most probable action instead of sampling.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long)]
    pub max_frames: Option<u32>,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub greedy: bool,
    /// Baseline JSON file; defaults to the built-in frozen baselines.
    #[arg(long)]
    pub baselines: Option<PathBuf>,
    /// Directory for scores.csv and the effective config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCommand {
    /// Train and evaluate once per action delay.
    DelaySweep(DelaySweepArgs),
    /// Train and evaluate once per score-filter fraction.
    QualityFilter(QualityFilterArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentFlags {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Evaluation episodes per checkpoint.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<u32>,
    /// Comma-separated training seeds of the protocol.
    #[arg(long, value_delimiter = ',')]
    pub protocol_seeds: Option<Vec<u64>>,
    /// Evaluate only the final checkpoint of each seed.
    #[arg(long)]
    pub final_only: bool,
    #[arg(long)]
    pub baselines: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DelaySweepArgs {
    #[command(flatten)]
    pub common: ExperimentFlags,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-2,0,2,3,5")]
    pub delays: Vec<i64>,
}

#[derive(Debug, Args)]
pub struct QualityFilterArgs {
    #[command(flatten)]
    pub common: ExperimentFlags,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.2")]
    pub fractions: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates checked per weight or bias tensor.
    #[arg(long, default_value_t = 24)]
    pub coords: usize,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum, value_delimiter = ',', default_value = "dodger,collector")]
    pub games: Vec<GameArg>,
    #[arg(long, default_value_t = 100_000)]
    pub random_episodes: usize,
    #[arg(long, default_value_t = 200)]
    pub expert_episodes: usize,
    #[arg(long)]
    pub max_frames: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, default_value_t = 50)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub expert_delay: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub max_frames: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

fn run<I: IntoIterator<Item = OsString>>(args: I) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .try_init();
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn main() -> ExitCode {
    run(std::env::args_os())
}
