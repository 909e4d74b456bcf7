//! Stack supervisor: starts components in dependency order, waits for
//! readiness, injects faults and tears everything down.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::Duration;

use parking_lot::Mutex;
use rca_core::clock::system_clock;
use rca_core::SharedClock;
use rca_services::{access, control, discovery, gateway, history, security, ServiceConfig};
use rca_simulator::SimScenario;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::process::{Child, Command};
use tokio::time::Instant;

use crate::node::{self, BrokerNodeConfig, Node, NodeConfig, NodeKind, SimulatorNodeConfig};
use crate::profile::{Mode, NodeSpec, Profile, ProfileError};

pub const NODE_BIN_ENV: &str = "RCA_NODE_BIN";
const STOP_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum StackError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("run directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("startup-timeout: {component} did not become ready: {reason}{}", tail(.log_tail))]
    StartupTimeout { component: String, reason: String, log_tail: String },
    #[error("unknown-target: no running component matches `{0}`")]
    UnknownTarget(String),
    #[error("unknown fault handle {0}")]
    UnknownFault(u64),
    #[error("{component} cannot be paused in-process: it serves no HTTP")]
    Unsupported { component: String },
    #[error("rca-node executable not found; set {NODE_BIN_ENV}")]
    NodeBinary,
}

fn tail(log: &str) -> String {
    if log.is_empty() {
        String::new()
    } else {
        format!("\n--- log tail ---\n{log}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "target", rename_all = "kebab-case")]
pub enum Fault {
    /// Kill one instance (service name or component name).
    KillInstance(String),
    /// Freeze one instance: it keeps its sockets but stops answering.
    PauseInstance(String),
    /// Close the broker listener and every broker session.
    DropBroker,
}

impl std::str::FromStr for Fault {
    type Err = String;

    /// `kill-instance:<target>`, `pause-instance:<target>` or `drop-broker`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("kill-instance", t)) if !t.is_empty() => Ok(Fault::KillInstance(t.into())),
            Some(("pause-instance", t)) if !t.is_empty() => Ok(Fault::PauseInstance(t.into())),
            None if s == "drop-broker" => Ok(Fault::DropBroker),
            _ => Err(format!("unknown fault `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FaultHandle {
    pub id: u64,
    pub fault: Fault,
    pub component: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentState {
    Running,
    Paused,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComponentInfo {
    pub name: String,
    pub kind: NodeKind,
    pub addr: Option<SocketAddr>,
    pub state: ComponentState,
    pub pid: Option<u32>,
}

/// One line of the lifecycle event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub ts: u64,
    pub event: String,
    pub component: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

struct EventLog {
    file: Mutex<std::fs::File>,
    events: Mutex<Vec<Event>>,
    clock: SharedClock,
}

impl EventLog {
    fn record(&self, event: &str, component: &str, detail: impl Into<String>) {
        let e = Event { ts: self.clock.now_ms(), event: event.into(), component: component.into(), detail: detail.into() };
        if let Ok(line) = serde_json::to_string(&e) {
            let _ = writeln!(self.file.lock(), "{line}");
        }
        tracing::info!(event = %e.event, component = %e.component, detail = %e.detail, "stack");
        self.events.lock().push(e);
    }
}

enum Instance {
    Inproc(Node),
    Process(Child),
}

struct Component {
    name: String,
    kind: NodeKind,
    spec: NodeSpec,
    /// Resolved at first start; restarts reuse it, including the bound port.
    config: Option<NodeConfig>,
    addr: Option<SocketAddr>,
    instance: Option<Instance>,
    paused: bool,
}

impl Component {
    fn pid(&self) -> Option<u32> {
        match &self.instance {
            Some(Instance::Process(c)) => c.id(),
            _ => None,
        }
    }

    fn state(&self) -> ComponentState {
        match (&self.instance, self.paused) {
            (None, _) => ComponentState::Stopped,
            (Some(_), true) => ComponentState::Paused,
            (Some(_), false) => ComponentState::Running,
        }
    }
}

enum RunDir {
    Temp(tempfile::TempDir),
    Fixed(PathBuf),
}

impl RunDir {
    fn path(&self) -> &Path {
        match self {
            RunDir::Temp(t) => t.path(),
            RunDir::Fixed(p) => p,
        }
    }
}

/// A running platform. Dropping it kills every component.
pub struct Stack {
    profile: Profile,
    // Declared before `run_dir` so components stop before their files go.
    components: Vec<Component>,
    events: EventLog,
    faults: BTreeMap<u64, FaultHandle>,
    next_fault: u64,
    clock: SharedClock,
    node_bin: Option<PathBuf>,
    http: reqwest::Client,
    run_dir: RunDir,
}

/// Locates `rca-node`: `$RCA_NODE_BIN`, else next to the running executable
/// (or one level up, for test binaries under `deps/`).
pub fn find_node_binary() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os(NODE_BIN_ENV) {
        return Some(PathBuf::from(p));
    }
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?;
    let name = format!("rca-node{}", std::env::consts::EXE_SUFFIX);
    [dir.join(&name), dir.parent()?.join(&name)].into_iter().find(|p| p.is_file())
}

impl Stack {
    pub async fn up(profile: Profile) -> Result<Stack, StackError> {
        let node_bin = match profile.mode {
            Mode::Process => Some(find_node_binary().ok_or(StackError::NodeBinary)?),
            Mode::Inproc => None,
        };
        Self::up_with(profile, node_bin).await
    }

    /// Like [`Stack::up`] with an explicit `rca-node` path for process mode.
    pub async fn up_with(profile: Profile, node_bin: Option<PathBuf>) -> Result<Stack, StackError> {
        profile.check()?;
        if profile.mode == Mode::Process && node_bin.is_none() {
            return Err(StackError::NodeBinary);
        }
        let run_dir = match &profile.run_dir {
            Some(p) => {
                std::fs::create_dir_all(p)?;
                RunDir::Fixed(p.clone())
            }
            None => RunDir::Temp(tempfile::Builder::new().prefix("rca-stack-").tempdir()?),
        };
        for sub in ["logs", "data", "conf"] {
            std::fs::create_dir_all(run_dir.path().join(sub))?;
        }
        let clock = system_clock();
        let events = EventLog {
            file: Mutex::new(std::fs::OpenOptions::new().create(true).append(true).open(run_dir.path().join("events.jsonl"))?),
            events: Mutex::new(Vec::new()),
            clock: clock.clone(),
        };
        let mut stack = Stack {
            components: component_list(&profile),
            profile,
            events,
            faults: BTreeMap::new(),
            next_fault: 1,
            clock,
            node_bin,
            http: reqwest::Client::builder().no_proxy().timeout(Duration::from_secs(1)).build().expect("http client"),
            run_dir,
        };
        let deadline = Instant::now() + Duration::from_millis(stack.profile.startup_timeout_ms);
        stack.events.record("stack-up", "stack", format!("{:?} mode", stack.profile.mode));
        for i in 0..stack.components.len() {
            if let Err(e) = stack.start_component(i, deadline).await {
                stack.events.record("startup-failed", &stack.components[i].name, e.to_string());
                stack.down().await;
                return Err(e);
            }
        }
        stack.events.record("stack-ready", "stack", "");
        Ok(stack)
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn run_dir(&self) -> &Path {
        self.run_dir.path()
    }

    pub fn admin_password(&self) -> &str {
        &self.profile.admin_password
    }

    pub fn addr(&self, component: &str) -> Option<SocketAddr> {
        self.components.iter().find(|c| c.name == component).and_then(|c| c.addr)
    }

    pub fn url(&self, component: &str) -> Option<String> {
        self.addr(component).map(|a| format!("http://{a}"))
    }

    pub fn gateway_url(&self) -> String {
        self.url("gateway").expect("gateway address")
    }

    pub fn discovery_url(&self) -> String {
        self.url("discovery").expect("discovery address")
    }

    pub fn broker_addr(&self) -> String {
        self.addr("broker").expect("broker address").to_string()
    }

    pub fn log_path(&self, component: &str) -> PathBuf {
        self.run_dir().join("logs").join(format!("{component}.log"))
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.events.lock().clone()
    }

    pub fn components(&self) -> Vec<ComponentInfo> {
        self.components
            .iter()
            .map(|c| ComponentInfo { name: c.name.clone(), kind: c.kind, addr: c.addr, state: c.state(), pid: c.pid() })
            .collect()
    }

    /// The in-process handle of a component (inproc mode only).
    pub fn node(&self, component: &str) -> Option<&Node> {
        match &self.components.iter().find(|c| c.name == component)?.instance {
            Some(Instance::Inproc(n)) => Some(n),
            _ => None,
        }
    }

    /// Records and forgets children that exited on their own.
    pub fn poll_exits(&mut self) -> Vec<String> {
        let mut exited = Vec::new();
        for c in &mut self.components {
            if let Some(Instance::Process(child)) = &mut c.instance {
                if let Ok(Some(status)) = child.try_wait() {
                    self.events.record("exited", &c.name, status.to_string());
                    c.instance = None;
                    c.paused = false;
                    exited.push(c.name.clone());
                }
            }
        }
        exited
    }

    pub async fn inject_fault(&mut self, fault: Fault) -> Result<FaultHandle, StackError> {
        let index = match &fault {
            Fault::KillInstance(t) => self.resolve(t, true)?,
            Fault::PauseInstance(t) => self.resolve(t, false)?,
            Fault::DropBroker => self.resolve("broker", true)?,
        };
        let name = self.components[index].name.clone();
        match &fault {
            Fault::KillInstance(_) | Fault::DropBroker => self.kill(index).await,
            Fault::PauseInstance(_) => self.pause(index)?,
        }
        let handle = FaultHandle { id: self.next_fault, fault, component: name.clone() };
        self.next_fault += 1;
        self.events.record("fault", &name, serde_json::to_string(&handle.fault).unwrap_or_default());
        self.faults.insert(handle.id, handle.clone());
        Ok(handle)
    }

    /// Undoes a fault: restarts a killed component on its old address, or
    /// thaws a paused one.
    pub async fn heal(&mut self, id: u64) -> Result<(), StackError> {
        let handle = self.faults.remove(&id).ok_or(StackError::UnknownFault(id))?;
        let index = self
            .components
            .iter()
            .position(|c| c.name == handle.component)
            .ok_or_else(|| StackError::UnknownTarget(handle.component.clone()))?;
        match handle.fault {
            Fault::PauseInstance(_) => self.resume(index),
            Fault::KillInstance(_) | Fault::DropBroker => {
                if self.components[index].instance.is_none() {
                    let deadline = Instant::now() + Duration::from_millis(self.profile.startup_timeout_ms);
                    self.start_component(index, deadline).await?;
                }
            }
        }
        self.events.record("healed", &handle.component, "");
        Ok(())
    }

    pub fn active_faults(&self) -> Vec<FaultHandle> {
        self.faults.values().cloned().collect()
    }

    /// Stops every component, newest first, and waits for each to exit.
    pub async fn down(&mut self) {
        for i in (0..self.components.len()).rev() {
            let Some(instance) = self.components[i].instance.take() else { continue };
            let name = self.components[i].name.clone();
            match instance {
                Instance::Inproc(node) => drop(node),
                Instance::Process(mut child) => {
                    if let Some(pid) = child.id() {
                        signal(pid, libc::SIGTERM);
                        signal(pid, libc::SIGCONT);
                    }
                    if tokio::time::timeout(STOP_GRACE, child.wait()).await.is_err() {
                        let _ = child.kill().await;
                    }
                }
            }
            self.components[i].paused = false;
            self.events.record("stopped", &name, "");
        }
        self.faults.clear();
        self.events.record("stack-down", "stack", "");
    }

    /// Finds a live component by name, else the first live instance of a
    /// service. Paused components only match when `paused_ok`.
    fn resolve(&self, target: &str, paused_ok: bool) -> Result<usize, StackError> {
        let live = |c: &Component| c.instance.is_some() && (paused_ok || !c.paused);
        if let Some(i) = self.components.iter().position(|c| c.name == target && live(c)) {
            return Ok(i);
        }
        let kind: NodeKind = target.parse().map_err(|_| StackError::UnknownTarget(target.into()))?;
        self.components
            .iter()
            .position(|c| c.kind == kind && live(c))
            .ok_or_else(|| StackError::UnknownTarget(target.into()))
    }

    async fn kill(&mut self, index: usize) {
        let c = &mut self.components[index];
        match c.instance.take() {
            Some(Instance::Inproc(node)) => drop(node),
            Some(Instance::Process(mut child)) => {
                let _ = child.kill().await;
            }
            None => {}
        }
        c.paused = false;
    }

    fn pause(&mut self, index: usize) -> Result<(), StackError> {
        let c = &mut self.components[index];
        match &c.instance {
            Some(Instance::Process(child)) => {
                if let Some(pid) = child.id() {
                    signal(pid, libc::SIGSTOP);
                }
            }
            Some(Instance::Inproc(node)) => {
                if !node.pause() {
                    return Err(StackError::Unsupported { component: c.name.clone() });
                }
            }
            None => return Err(StackError::UnknownTarget(c.name.clone())),
        }
        c.paused = true;
        Ok(())
    }

    fn resume(&mut self, index: usize) {
        let c = &mut self.components[index];
        match &c.instance {
            Some(Instance::Process(child)) => {
                if let Some(pid) = child.id() {
                    signal(pid, libc::SIGCONT);
                }
            }
            Some(Instance::Inproc(node)) => {
                node.resume();
            }
            None => {}
        }
        c.paused = false;
    }

    async fn start_component(&mut self, index: usize, deadline: Instant) -> Result<(), StackError> {
        let name = self.components[index].name.clone();
        let fail = |reason: String, log_tail: String| StackError::StartupTimeout { component: name.clone(), reason, log_tail };
        let config = match &self.components[index].config {
            Some(c) => c.clone(),
            None => self.build_config(index)?,
        };
        self.events.record("starting", &name, "");
        let (instance, addr) = match self.profile.mode {
            Mode::Inproc => {
                let node = node::start(config.clone(), self.clock.clone()).await.map_err(|e| fail(e.to_string(), String::new()))?;
                let addr = node.addr();
                (Instance::Inproc(node), addr)
            }
            Mode::Process => {
                let (child, addr) = self.spawn(&name, &config, deadline).await.map_err(|reason| fail(reason, self.log_tail(&name, 20)))?;
                (Instance::Process(child), addr)
            }
        };
        let c = &mut self.components[index];
        c.instance = Some(instance);
        c.addr = addr;
        c.paused = false;
        let mut config = config;
        if let Some(a) = addr {
            config.set_bind(a);
        }
        c.config = Some(config);
        if let Err(reason) = self.wait_ready(index, deadline).await {
            let log_tail = self.log_tail(&name, 20);
            return Err(StackError::StartupTimeout { component: name, reason, log_tail });
        }
        self.events.record("ready", &name, addr.map(|a| a.to_string()).unwrap_or_default());
        Ok(())
    }

    async fn spawn(&self, name: &str, config: &NodeConfig, deadline: Instant) -> Result<(Child, Option<SocketAddr>), String> {
        let dir = self.run_dir();
        let conf_path = dir.join("conf").join(format!("{name}.json"));
        let addr_path = dir.join("conf").join(format!("{name}.addr"));
        std::fs::write(&conf_path, serde_json::to_vec_pretty(config).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let _ = std::fs::remove_file(&addr_path);
        let log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path(name))
            .map_err(|e| format!("log file: {e}"))?;
        let log2 = log.try_clone().map_err(|e| e.to_string())?;
        let mut cmd = Command::new(self.node_bin.as_ref().expect("process mode has a node binary"));
        cmd.arg("--config")
            .arg(&conf_path)
            .arg("--addr-file")
            .arg(&addr_path)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log2)
            .kill_on_drop(true);
        if std::env::var_os("RUST_LOG").is_none() {
            cmd.env("RUST_LOG", "info");
        }
        cmd.envs(self.components.iter().find(|c| c.name == name).map(|c| c.spec.env.clone()).unwrap_or_default());
        #[cfg(target_os = "linux")]
        // SAFETY: prctl is async-signal-safe and touches no memory of ours.
        unsafe {
            cmd.pre_exec(|| {
                if libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                Ok(())
            });
        }
        let mut child = cmd.spawn().map_err(|e| format!("spawn rca-node: {e}"))?;
        loop {
            if let Ok(Some(status)) = child.try_wait() {
                return Err(format!("exited during startup ({status})"));
            }
            if let Ok(text) = std::fs::read_to_string(&addr_path) {
                let text = text.trim();
                if text == "none" {
                    return Ok((child, None));
                }
                if let Ok(addr) = text.parse::<SocketAddr>() {
                    return Ok((child, Some(addr)));
                }
            }
            if Instant::now() >= deadline {
                let _ = child.kill().await;
                return Err("timed out waiting for the listener".into());
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    async fn wait_ready(&mut self, index: usize, deadline: Instant) -> Result<(), String> {
        let kind = self.components[index].kind;
        let addr = self.components[index].addr;
        let discovery = self.url("discovery");
        loop {
            if let Some(Instance::Process(child)) = &mut self.components[index].instance {
                if let Ok(Some(status)) = child.try_wait() {
                    return Err(format!("exited during startup ({status})"));
                }
            }
            match self.probe(kind, addr, discovery.as_deref()).await {
                Ok(()) => return Ok(()),
                Err(e) if Instant::now() >= deadline => return Err(e),
                Err(_) => {}
            }
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
    }

    /// One readiness check: listening, healthy, and registered if it should be.
    async fn probe(&self, kind: NodeKind, addr: Option<SocketAddr>, discovery: Option<&str>) -> Result<(), String> {
        let Some(addr) = addr else { return Ok(()) };
        if kind == NodeKind::Broker {
            return tokio::net::TcpStream::connect(addr).await.map(|_| ()).map_err(|e| format!("broker not accepting: {e}"));
        }
        let health = self.http.get(format!("http://{addr}/health")).send().await.map_err(|e| format!("health: {e}"))?;
        if health.status() != reqwest::StatusCode::OK {
            return Err(format!("health answered {}", health.status()));
        }
        if kind.registers() {
            let discovery = discovery.ok_or("discovery is not running")?;
            let all: serde_json::Value = self
                .http
                .get(format!("{discovery}/registry/services"))
                .send()
                .await
                .map_err(|e| format!("discovery: {e}"))?
                .json()
                .await
                .map_err(|e| format!("discovery: {e}"))?;
            let url = format!("http://{addr}");
            let registered = all[kind.as_str()].as_array().is_some_and(|list| list.iter().any(|i| i["baseUrl"] == url));
            if !registered {
                return Err("not registered in discovery".into());
            }
        }
        Ok(())
    }

    fn log_tail(&self, name: &str, lines: usize) -> String {
        let text = std::fs::read_to_string(self.log_path(name)).unwrap_or_default();
        let all: Vec<&str> = text.lines().collect();
        all[all.len().saturating_sub(lines)..].join("\n")
    }

    fn build_config(&self, index: usize) -> Result<NodeConfig, StackError> {
        let c = &self.components[index];
        let p = &self.profile;
        let bind = |port: u16| SocketAddr::from(([127, 0, 0, 1], port));
        let service = || ServiceConfig {
            bind: bind(c.spec.port),
            advertise_host: None,
            instance_id: None,
            discovery_url: self.url("discovery").unwrap_or_default(),
            token_secret: p.token_secret.clone(),
            heartbeat_ms: p.heartbeat_ms,
            breaker: p.breaker,
            data_dir: self.run_dir().join("data").join(&c.name),
        };
        let broker = || self.addr("broker").map(|a| a.to_string()).unwrap_or_default();
        let config = match c.kind {
            NodeKind::Broker => NodeConfig::Broker(BrokerNodeConfig { bind: bind(p.broker.port), outbound_queue: p.broker.outbound_queue }),
            NodeKind::Discovery => NodeConfig::Discovery(discovery::DiscoveryConfig {
                bind: bind(p.discovery.port),
                ttl_ms: p.discovery.ttl_ms,
                sweep_ms: p.discovery.sweep_ms,
            }),
            NodeKind::Security => NodeConfig::Security(security::SecurityConfig {
                service: service(),
                admin_password: p.admin_password.clone(),
                hash_iterations: p.hash_iterations,
                ..Default::default()
            }),
            NodeKind::AccessControl => NodeConfig::AccessControl(access::AccessConfig { service: service(), ..Default::default() }),
            NodeKind::History => NodeConfig::History(history::HistoryConfig { service: service(), broker: broker(), ..Default::default() }),
            NodeKind::RemoteControl => NodeConfig::RemoteControl(control::ControlConfig { service: service(), broker: broker(), ..Default::default() }),
            NodeKind::Gateway => NodeConfig::Gateway(gateway::GatewayConfig {
                service: service(),
                ui_dir: Some(self.run_dir().join("ui")),
                ..Default::default()
            }),
            NodeKind::Simulator => {
                let spec = p.simulator.as_ref().expect("simulator component implies a simulator spec");
                NodeConfig::Simulator(SimulatorNodeConfig { broker: broker(), scenario: load_scenario(spec)? })
            }
        };
        merge_flags(config, &c.spec, &c.name)
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        // Children are killed by `kill_on_drop`; reap them so no zombie or
        // port outlives the stack.
        for c in &mut self.components {
            if let Some(Instance::Process(child)) = &mut c.instance {
                let _ = child.start_kill();
                if let Some(pid) = child.id() {
                    let mut status = 0;
                    // SAFETY: plain waitpid on our own child.
                    unsafe { libc::waitpid(pid as libc::pid_t, &mut status, 0) };
                }
            }
        }
    }
}

fn signal(pid: u32, sig: libc::c_int) {
    // SAFETY: sending a signal to a child we own.
    unsafe {
        libc::kill(pid as libc::pid_t, sig);
    }
}

fn component_list(p: &Profile) -> Vec<Component> {
    let mk = |name: String, kind: NodeKind, spec: NodeSpec| Component { name, kind, spec, config: None, addr: None, instance: None, paused: false };
    let env_only = |env: &BTreeMap<String, String>| NodeSpec { env: env.clone(), ..NodeSpec::default() };
    let mut out = vec![
        mk("broker".into(), NodeKind::Broker, env_only(&p.broker.env)),
        mk("discovery".into(), NodeKind::Discovery, env_only(&p.discovery.env)),
        mk("security".into(), NodeKind::Security, p.security.clone()),
        mk("accesscontrol".into(), NodeKind::AccessControl, p.access_control.clone()),
    ];
    for (i, spec) in p.history.iter().enumerate() {
        let name = if i == 0 { "history".to_string() } else { format!("history-{}", i + 1) };
        out.push(mk(name, NodeKind::History, spec.clone()));
    }
    out.push(mk("remotecontrol".into(), NodeKind::RemoteControl, p.remote_control.clone()));
    out.push(mk("gateway".into(), NodeKind::Gateway, p.gateway.clone()));
    if let Some(sim) = &p.simulator {
        out.push(mk("simulator".into(), NodeKind::Simulator, env_only(&sim.env)));
    }
    out
}

fn load_scenario(spec: &crate::profile::SimulatorSpec) -> Result<SimScenario, StackError> {
    let bad = |e: String| StackError::StartupTimeout { component: "simulator".into(), reason: e, log_tail: String::new() };
    if let Some(f) = &spec.fleet {
        return rca_simulator::generate_fleet_with_period(f.homes, f.items, f.seed, f.period_ms).map_err(|e| bad(e.to_string()));
    }
    if let Some(path) = &spec.scenario {
        return SimScenario::load(path).map_err(|e| bad(e.to_string()));
    }
    let doc = spec.inline.clone().unwrap_or_default();
    SimScenario::from_json(&doc.to_string()).map_err(|e| bad(e.to_string()))
}

/// Applies profile flags on top of the generated configuration. Flags must
/// name existing configuration keys.
fn merge_flags(config: NodeConfig, spec: &NodeSpec, component: &str) -> Result<NodeConfig, StackError> {
    if spec.flags.is_empty() {
        return Ok(config);
    }
    let mut doc = serde_json::to_value(&config).map_err(ProfileError::Json)?;
    let fields = doc["config"].as_object_mut().expect("component configs are objects");
    for (k, v) in &spec.flags {
        if !fields.contains_key(k) {
            return Err(ProfileError::UnknownFlag { component: component.into(), flag: k.clone() }.into());
        }
        fields.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(doc).map_err(ProfileError::Json)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faults_parse() {
        assert_eq!("kill-instance:history".parse(), Ok(Fault::KillInstance("history".into())));
        assert_eq!("pause-instance:gateway".parse(), Ok(Fault::PauseInstance("gateway".into())));
        assert_eq!("drop-broker".parse(), Ok(Fault::DropBroker));
        assert!("kill-instance:".parse::<Fault>().is_err());
        assert!("melt".parse::<Fault>().is_err());
        assert_eq!(
            serde_json::to_string(&Fault::KillInstance("history".into())).unwrap(),
            r#"{"kind":"kill-instance","target":"history"}"#
        );
    }

    #[test]
    fn components_follow_dependency_order() {
        let mut p = Profile::inproc();
        p.history.push(NodeSpec::default());
        p.simulator = Some(crate::profile::SimulatorSpec {
            fleet: Some(crate::profile::FleetSpec { homes: 1, items: 1, seed: 1, period_ms: 1000 }),
            ..Default::default()
        });
        let names: Vec<String> = component_list(&p).into_iter().map(|c| c.name).collect();
        assert_eq!(
            names,
            ["broker", "discovery", "security", "accesscontrol", "history", "history-2", "remotecontrol", "gateway", "simulator"]
        );
    }

    #[test]
    fn flags_override_known_keys_only() {
        let base = NodeConfig::History(history::HistoryConfig::default());
        let spec = NodeSpec::default().flag("historyCap", 7).flag("persist", false);
        let NodeConfig::History(h) = merge_flags(base.clone(), &spec, "history").unwrap() else { panic!() };
        assert_eq!(h.history_cap, 7);
        assert!(!h.persist);
        let typo = NodeSpec::default().flag("histroyCap", 7);
        assert!(matches!(
            merge_flags(base, &typo, "history"),
            Err(StackError::Profile(ProfileError::UnknownFlag { .. }))
        ));
    }
}
