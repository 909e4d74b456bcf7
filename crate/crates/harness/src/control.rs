//! Control channel between `rca-stack up` and later `down|fault|heal|status`
//! invocations: one JSON request and one JSON response per connection over
//! a Unix socket in the run directory.

use std::future::Future;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{UnixListener, UnixStream};

use crate::stack::{ComponentInfo, Fault, FaultHandle, Stack};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Request {
    Status,
    Fault { fault: Fault },
    Heal { id: u64 },
    Down,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultHandle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<ComponentInfo>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<FaultHandle>,
}

impl Response {
    fn error(e: impl ToString) -> Self {
        Self { ok: false, error: Some(e.to_string()), ..Self::default() }
    }
}

pub fn socket_path(run_dir: &Path) -> PathBuf {
    run_dir.join("control.sock")
}

/// Sends one request to the supervisor owning `run_dir`.
pub async fn request(run_dir: &Path, req: &Request) -> std::io::Result<Response> {
    let mut stream = UnixStream::connect(socket_path(run_dir)).await?;
    let mut line = serde_json::to_vec(req)?;
    line.push(b'\n');
    stream.write_all(&line).await?;
    let mut reader = BufReader::new(stream);
    let mut reply = String::new();
    reader.read_line(&mut reply).await?;
    Ok(serde_json::from_str(&reply)?)
}

/// Runs the supervisor loop until a `down` request or `shutdown` resolves,
/// then stops the stack. Requests are handled one at a time.
pub async fn supervise(mut stack: Stack, listener: UnixListener, shutdown: impl Future<Output = ()>) {
    tokio::pin!(shutdown);
    let mut tick = tokio::time::interval(Duration::from_millis(500));
    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            _ = tick.tick() => {
                for name in stack.poll_exits() {
                    tracing::warn!(component = %name, "component exited unexpectedly");
                }
            }
            conn = listener.accept() => {
                let Ok((stream, _)) = conn else { continue };
                if handle(&mut stack, stream).await {
                    break;
                }
            }
        }
    }
    stack.down().await;
}

/// Serves one connection; returns whether the stack should go down.
async fn handle(stack: &mut Stack, stream: UnixStream) -> bool {
    let (read, mut write) = stream.into_split();
    let mut line = String::new();
    let read_ok = tokio::time::timeout(Duration::from_secs(5), BufReader::new(read).read_line(&mut line)).await;
    let (response, down) = match read_ok {
        Ok(Ok(_)) => match serde_json::from_str::<Request>(&line) {
            Ok(Request::Down) => (Response { ok: true, ..Response::default() }, true),
            Ok(Request::Status) => (
                Response { ok: true, components: Some(stack.components()), faults: stack.active_faults(), ..Response::default() },
                false,
            ),
            Ok(Request::Fault { fault }) => match stack.inject_fault(fault).await {
                Ok(h) => (Response { ok: true, fault: Some(h), ..Response::default() }, false),
                Err(e) => (Response::error(e), false),
            },
            Ok(Request::Heal { id }) => match stack.heal(id).await {
                Ok(()) => (Response { ok: true, ..Response::default() }, false),
                Err(e) => (Response::error(e), false),
            },
            Err(e) => (Response::error(format!("malformed request: {e}")), false),
        },
        _ => (Response::error("no request received"), false),
    };
    if let Ok(mut bytes) = serde_json::to_vec(&response) {
        bytes.push(b'\n');
        let _ = write.write_all(&bytes).await;
    }
    down
}
