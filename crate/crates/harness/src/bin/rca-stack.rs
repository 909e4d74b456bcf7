//! `rca-stack up|down|status|fault|heal --profile FILE`

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rca_harness::control::{self, Request};
use rca_harness::{Fault, Profile, Stack};
use tokio::signal::unix::{signal, SignalKind};

#[derive(Parser)]
#[command(name = "rca-stack", about = "Run the whole platform locally and inject faults into it")]
struct Args {
    /// Stack profile (JSON)
    #[arg(long, global = true, default_value = "profiles/default.json")]
    profile: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Start every component and supervise it until `down` or Ctrl-C
    Up,
    /// Stop a running stack
    Down,
    /// Components, addresses and active faults of a running stack
    Status,
    /// Inject a fault: kill-instance:<service>, pause-instance:<service> or drop-broker
    Fault { fault: Fault },
    /// Undo a fault by its handle id
    Heal { id: u64 },
}

/// Where a profile without `runDir` keeps its state, so later invocations
/// can find the running supervisor.
fn run_dir(profile_path: &Path, profile: &Profile) -> PathBuf {
    profile.run_dir.clone().unwrap_or_else(|| {
        let stem = profile_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "stack".into());
        profile_path.parent().unwrap_or(Path::new(".")).join(".rca-stack").join(stem)
    })
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let mut profile = match Profile::load(&args.profile) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("rca-stack: {e}");
            return ExitCode::from(3);
        }
    };
    let dir = run_dir(&args.profile, &profile);
    let req = match args.cmd {
        Cmd::Up => {
            profile.run_dir = Some(dir.clone());
            return up(profile, &dir).await;
        }
        Cmd::Down => Request::Down,
        Cmd::Status => Request::Status,
        Cmd::Fault { fault } => Request::Fault { fault },
        Cmd::Heal { id } => Request::Heal { id },
    };
    match control::request(&dir, &req).await {
        Ok(resp) if resp.ok => {
            match (&resp.fault, &resp.components) {
                (Some(h), _) => println!("fault {} injected into {}", h.id, h.component),
                (_, Some(_)) => println!("{}", serde_json::to_string_pretty(&resp).unwrap_or_default()),
                _ => println!("ok"),
            }
            ExitCode::SUCCESS
        }
        Ok(resp) => {
            eprintln!("rca-stack: {}", resp.error.unwrap_or_default());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("rca-stack: no running stack for {} ({e})", args.profile.display());
            ExitCode::from(2)
        }
    }
}

async fn up(profile: Profile, dir: &Path) -> ExitCode {
    let socket = control::socket_path(dir);
    if control::request(dir, &Request::Status).await.is_ok() {
        eprintln!("rca-stack: a stack is already running in {}", dir.display());
        return ExitCode::from(1);
    }
    let _ = std::fs::remove_file(&socket);
    let stack = match Stack::up(profile).await {
        Ok(s) => s,
        Err(e) => {
            eprintln!("rca-stack: {e}");
            return ExitCode::from(1);
        }
    };
    let listener = match tokio::net::UnixListener::bind(&socket) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("rca-stack: control socket {}: {e}", socket.display());
            return ExitCode::from(1);
        }
    };
    let summary = serde_json::json!({
        "gateway": stack.gateway_url(),
        "discovery": stack.discovery_url(),
        "broker": stack.broker_addr(),
        "runDir": dir,
        "components": stack.components(),
    });
    let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
    let _ = std::fs::write(dir.join("stack.json"), &text);
    println!("{text}");
    let shutdown = async {
        match (signal(SignalKind::terminate()), signal(SignalKind::interrupt())) {
            (Ok(mut t), Ok(mut i)) => {
                tokio::select! {
                    _ = t.recv() => {}
                    _ = i.recv() => {}
                }
            }
            _ => std::future::pending().await,
        }
    };
    control::supervise(stack, listener, shutdown).await;
    let _ = std::fs::remove_file(&socket);
    ExitCode::SUCCESS
}
