//! `mdinet`: runs scenarios from a config file and writes CSV/JSON tables.

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdinet::comb::CombError;
use mdinet::engine::EngineError;
use mdinet::interference::InterferenceError;
use mdinet::netplan::NetplanError;
use mdinet::protocol::ProtocolError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MDINET_OUT_DIR";
/// Version of every emitted JSON document.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        let msg = e.to_string();
        match e {
            EngineError::Comb(CombError::Unstable { .. })
            | EngineError::Interference(InterferenceError::QuadratureNonConvergence { .. })
            | EngineError::Protocol(ProtocolError::Numeric(_))
            | EngineError::Control(mdinet::control::ControlError::Interference(_)) => {
                CliError::Numeric(msg)
            }
            EngineError::Protocol(ProtocolError::InvalidTally(_))
            | EngineError::Protocol(ProtocolError::MissingCell { .. }) => CliError::Numeric(msg),
            _ => CliError::Config(msg),
        }
    }
}

impl From<CombError> for CliError {
    fn from(e: CombError) -> Self {
        EngineError::from(e).into()
    }
}

impl From<InterferenceError> for CliError {
    fn from(e: InterferenceError) -> Self {
        EngineError::from(e).into()
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        EngineError::from(e).into()
    }
}

impl From<NetplanError> for CliError {
    fn from(e: NetplanError) -> Self {
        match e {
            NetplanError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "mdinet",
    version,
    about = "Comb-based fully connected MDI-QKD network simulator"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Scenario config file (TOML).
    #[arg(short, long, global = true, conflicts_with = "profile")]
    pub config: Option<String>,
    /// Built-in profile used when no config file is given.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// `section.key=value` replacement, applied in order.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replaces the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: $MDINET_OUT_DIR, then ./mdinet-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Validate the config and exit without running.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Caps worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

impl CommonArgs {
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("mdinet-out"))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run consecutive key blocks; writes simulate.json, key_rate.csv, control_trace.csv.
    Simulate,
    /// HOM dip versus delay; writes hom_scan.csv and hom_scan.json.
    HomScan,
    /// Key rate over distance for standard and ULL fiber; writes keyrate_vs_distance.csv.
    KeyrateVsDistance,
    /// Repetition-rate lock trajectory; writes lock_sim.csv and lock_sim.json.
    LockSim {
        /// Run with the controller switched off.
        #[arg(long)]
        open_loop: bool,
    },
    /// Polarization and timing control traces; writes compensate.csv and compensate.json.
    Compensate,
    /// Channel and TDM allocation; writes netplan.csv and netplan.json.
    Netplan {
        /// Raw key rate per channel (default: the scenario's static key rate).
        #[arg(long)]
        raw_rate_bps: Option<f64>,
    },
    /// Re-analyzes the tallies of a simulate.json and checks the stored reports.
    Replay {
        /// Path to a simulate.json.
        result: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let c = &cli.common;
    match cli.command {
        Command::Replay { result } => commands::replay(c, &result),
        command => {
            let text = config::read_source(c.config.as_deref(), c.profile.as_deref())?;
            let cfg = config::parse(&text, &c.overrides, c.seed)?;
            match command {
                Command::Simulate => commands::simulate(c, &cfg),
                Command::HomScan => commands::hom_scan(c, &cfg),
                Command::KeyrateVsDistance => commands::keyrate_vs_distance(c, &cfg),
                Command::LockSim { open_loop } => commands::lock_sim(c, &cfg, open_loop),
                Command::Compensate => commands::compensate(c, &cfg),
                Command::Netplan { raw_rate_bps } => commands::netplan(c, &cfg, raw_rate_bps),
                Command::Replay { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mdinet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
