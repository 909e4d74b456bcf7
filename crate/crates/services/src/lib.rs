//! The platform's HTTP services: discovery, security, access control,
//! history, remote control and the API gateway.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rca_core::resilience::{BreakerConfig, RoundRobin};
use rca_core::SharedClock;
use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;

pub mod access;
pub mod access_client;
pub mod control;
pub mod discovery;
pub mod gateway;
pub mod history;
pub mod http;
pub mod registry_client;
pub mod security;
pub mod upstream;

use discovery::RegisterRequest;
use http::PauseSwitch;
use registry_client::{spawn_lease, DiscoveryClient};
use upstream::Upstream;

pub const DEV_SECRET: &str = "rca-dev-secret-change-me";

/// Settings shared by every service that registers with discovery.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Host placed in the advertised base URL; defaults to the bind IP.
    pub advertise_host: Option<String>,
    pub instance_id: Option<String>,
    pub discovery_url: String,
    pub token_secret: String,
    pub heartbeat_ms: u64,
    pub breaker: BreakerConfig,
    pub data_dir: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            advertise_host: None,
            instance_id: None,
            discovery_url: "http://127.0.0.1:7000".into(),
            token_secret: DEV_SECRET.into(),
            heartbeat_ms: 10_000,
            breaker: BreakerConfig::default(),
            data_dir: PathBuf::from("data"),
        }
    }
}

impl ServiceConfig {
    pub fn with_port(port: u16) -> Self {
        Self { bind: SocketAddr::from(([127, 0, 0, 1], port)), ..Self::default() }
    }

    fn base_url(&self, addr: SocketAddr) -> String {
        let host = self.advertise_host.clone().unwrap_or_else(|| addr.ip().to_string());
        format!("http://{host}:{}", addr.port())
    }

    fn instance_id(&self, service: &str, addr: SocketAddr) -> String {
        self.instance_id
            .clone()
            .unwrap_or_else(|| format!("{service}-{}", addr.port()))
    }
}

/// A started service. Dropping it stops the listener, every open
/// connection and all background tasks.
pub struct RunningService {
    pub name: &'static str,
    pub instance_id: String,
    pub addr: SocketAddr,
    pause: PauseSwitch,
    tasks: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for RunningService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunningService")
            .field("name", &self.name)
            .field("instance_id", &self.instance_id)
            .field("addr", &self.addr)
            .finish()
    }
}

impl RunningService {
    pub fn new(
        name: &'static str,
        instance_id: String,
        addr: SocketAddr,
        pause: PauseSwitch,
        tasks: Vec<JoinHandle<()>>,
    ) -> Self {
        Self { name, instance_id, addr, pause, tasks }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn pause(&self) {
        self.pause.set(true);
    }

    pub fn resume(&self) {
        self.pause.set(false);
    }

    pub fn add_task(&mut self, task: JoinHandle<()>) {
        self.tasks.push(task);
    }

    /// Waits until the HTTP server task ends (it only ends when aborted).
    pub async fn wait(mut self) {
        if let Some(server) = self.tasks.first_mut() {
            let _ = server.await;
        }
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        for task in &self.tasks {
            task.abort();
        }
    }
}

/// Discovery-facing plumbing for one service instance.
pub struct Cluster {
    pub caller: &'static str,
    pub discovery: Arc<DiscoveryClient>,
    pub balancer: Arc<RoundRobin>,
    pub breaker: BreakerConfig,
    pub clock: SharedClock,
}

impl Cluster {
    pub fn new(caller: &'static str, config: &ServiceConfig, clock: SharedClock) -> Self {
        Self {
            caller,
            discovery: Arc::new(DiscoveryClient::new(config.discovery_url.clone())),
            balancer: Arc::new(RoundRobin::new()),
            breaker: config.breaker,
            clock,
        }
    }

    pub fn upstream(&self, target: &str) -> Arc<Upstream> {
        Arc::new(Upstream::new(
            self.caller,
            target,
            self.discovery.clone(),
            self.balancer.clone(),
            self.breaker,
            self.clock.clone(),
        ))
    }

    pub fn lease(&self, config: &ServiceConfig, addr: SocketAddr, instance_id: &str) -> JoinHandle<()> {
        spawn_lease(
            self.discovery.clone(),
            RegisterRequest {
                service_name: self.caller.to_string(),
                instance_id: instance_id.to_string(),
                base_url: config.base_url(addr),
            },
            Duration::from_millis(config.heartbeat_ms.max(1)),
        )
    }
}
