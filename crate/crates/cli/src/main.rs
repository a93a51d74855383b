use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use log::info;
use paintrig::bridge::{self, ServeOptions};
use paintrig_core::controller::PaintMode;
use paintrig_core::mission::{self, ReplayStatus};
use paintrig_core::scenario::{ConfigError, Scenario, ScenarioConfig};

/// Simulator and operator link for a rope-suspended wall-painting rig.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Paint a scenario start to finish in virtual time and write artifacts.
    Run {
        scenario: PathBuf,
        /// Directory for report.json, events.jsonl and coverage maps.
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the paint mode.
        #[arg(long)]
        mode: Option<PaintMode>,
    },
    /// Run the scenario in real time behind a TCP / WebSocket operator link.
    Serve {
        scenario: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Simulated seconds per real second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Re-execute an event log and check the output is byte-identical.
    Replay { log: PathBuf },
}

const EXIT_CONFIG: u8 = 1;

fn load(path: &PathBuf, seed: Option<u64>, mode: Option<PaintMode>) -> Result<Scenario, ConfigError> {
    let mut config = ScenarioConfig::load(path)?;
    if let Some(seed) = seed {
        config.sim.seed = seed;
    }
    if let Some(mode) = mode {
        config.sim.mode = mode;
    }
    config.validate()
}

fn run(scenario: PathBuf, out: PathBuf, seed: Option<u64>, mode: Option<PaintMode>) -> Result<u8> {
    let scenario = match load(&scenario, seed, mode) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_CONFIG);
        }
    };
    let report = mission::run_mission(scenario, &out)?;
    println!(
        "{:?}: painted {:.2}% (least-covered wall), quality {}, max position error {:.4} mm, {} ticks",
        report.outcome,
        report.coverage.painted_fraction * 100.0,
        report.quality,
        report.max_position_error,
        report.tick_count,
    );
    for band in &report.coverage.unpainted_bands {
        println!("unpainted band: y {} to {} mm", band.y_from, band.y_to);
    }
    println!("artifacts in {}", out.display());
    Ok(report.outcome.exit_code() as u8)
}

fn serve(scenario: PathBuf, host: IpAddr, port: u16, speed: f64) -> Result<u8> {
    let scenario = match load(&scenario, None, None) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_CONFIG);
        }
    };
    let listener = match bridge::bind(SocketAddr::new(host, port)) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Ok(1);
        }
    };
    let addr = listener.local_addr()?;
    println!("listening on {addr} (raw frames, or WebSocket at ws://{addr}{})", bridge::LINK_PATH);
    info!("serving {} column(s)", scenario.plan.column_centers.len());
    bridge::serve(listener, scenario, ServeOptions { speed })?;
    println!("session closed");
    Ok(0)
}

fn replay(log: PathBuf) -> Result<u8> {
    let summary = match mission::replay_file(&log) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(1);
        }
    };
    println!(
        "{} lines logged, {} regenerated, {} commands, {} ticks, outcome {:?}",
        summary.logged_lines, summary.regenerated_lines, summary.commands, summary.ticks, summary.outcome
    );
    match &summary.status {
        ReplayStatus::Identical => println!("identical"),
        ReplayStatus::Diverged { line, expected, found } => {
            println!("diverged at line {line}");
            println!("  expected: {}", expected.as_deref().unwrap_or("<end of log>"));
            println!("  found:    {}", found.as_deref().unwrap_or("<end of log>"));
        }
        ReplayStatus::Truncated { complete_lines } => {
            println!("truncated after {complete_lines} complete lines");
        }
    }
    Ok(summary.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PAINTRIG_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run { scenario, out, seed, mode } => run(scenario, out, seed, mode),
        Cmd::Serve { scenario, port, host, speed } => serve(scenario, host, port, speed),
        Cmd::Replay { log } => replay(log),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
