use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rca_core::clock::system_clock;
use rca_simulator::{generate_fleet_with_period, run, RunOptions, SimScenario};

#[derive(Parser)]
#[command(name = "simulator", about = "Simulated smart-home fleet")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario against a broker until interrupted.
    Run {
        /// Scenario JSON file
        #[arg(long)]
        scenario: PathBuf,
        /// Broker address (host:port)
        #[arg(long, default_value = "127.0.0.1:1883")]
        broker: String,
    },
    /// Write a generated fleet scenario.
    Gen {
        /// Number of homes
        #[arg(long)]
        homes: usize,
        /// Items per home
        #[arg(long)]
        items: usize,
        /// Seed for item kinds and behaviours
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Publish period of every item
        #[arg(long, default_value_t = rca_simulator::fleet::DEFAULT_PERIOD_MS)]
        period_ms: u64,
        /// Output file (stdout when omitted)
        #[arg(short = 'o', long)]
        output: Option<PathBuf>,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Cmd::Run { scenario, broker } => {
            let scenario = match SimScenario::load(&scenario) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("simulator: {}: {e}", scenario.display());
                    return ExitCode::from(3);
                }
            };
            let mut handle = run(&scenario, &broker, RunOptions::new(system_clock()));
            tracing::info!(homes = scenario.homes.len(), items = scenario.item_count(), %broker, "simulation running");
            let _ = tokio::signal::ctrl_c().await;
            let published = handle.shutdown().await;
            tracing::info!(published, "stopped");
            ExitCode::SUCCESS
        }
        Cmd::Gen { homes, items, seed, period_ms, output } => {
            let scenario = match generate_fleet_with_period(homes, items, seed, period_ms) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("simulator: {e}");
                    return ExitCode::from(3);
                }
            };
            let json = scenario.to_json();
            match output {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, json) {
                        eprintln!("simulator: {}: {e}", path.display());
                        return ExitCode::from(1);
                    }
                }
                None => println!("{json}"),
            }
            ExitCode::SUCCESS
        }
    }
}
