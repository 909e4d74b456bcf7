//! Runs one platform component from a config document written by the
//! stack supervisor.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rca_harness::NodeConfig;
use tokio::signal::unix::{signal, SignalKind};

#[derive(Parser)]
#[command(name = "rca-node", about = "Run one platform component")]
struct Args {
    /// Component config document (`{"kind": .., "config": {..}}`)
    #[arg(long)]
    config: PathBuf,
    /// Receives the bound address (or `none`) once the component is up
    #[arg(long)]
    addr_file: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let config: NodeConfig = match std::fs::read_to_string(&args.config)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(c) => c,
        Err(e) => {
            eprintln!("rca-node: {}: {e}", args.config.display());
            return ExitCode::from(3);
        }
    };
    let kind = config.kind();
    let node = match rca_harness::node::start(config, rca_core::clock::system_clock()).await {
        Ok(n) => n,
        Err(e) => {
            eprintln!("rca-node: {kind} failed to start: {e}");
            return ExitCode::from(1);
        }
    };
    let addr = node.addr().map(|a| a.to_string()).unwrap_or_else(|| "none".into());
    tracing::info!(component = %kind, %addr, "started");
    if let Some(path) = &args.addr_file {
        let tmp = path.with_extension("tmp");
        if let Err(e) = std::fs::write(&tmp, &addr).and_then(|_| std::fs::rename(&tmp, path)) {
            eprintln!("rca-node: cannot write {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    let (Ok(mut term), Ok(mut int)) = (signal(SignalKind::terminate()), signal(SignalKind::interrupt())) else {
        eprintln!("rca-node: cannot install signal handlers");
        return ExitCode::from(1);
    };
    tokio::select! {
        _ = term.recv() => {}
        _ = int.recv() => {}
    }
    tracing::info!(component = %kind, "stopping");
    drop(node);
    ExitCode::SUCCESS
}
