//! Remote control: validates, authorizes and dispatches commands to homes.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRef, Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use futures::future::BoxFuture;
use parking_lot::Mutex;
use rca_broker::{command_topic, ClientOptions, MqttClient};
use rca_core::journal::Journal;
use rca_core::resilience::{BreakerConfig, CircuitBreaker, Outcome};
use rca_core::{validate_value, AccessItem, AccessMode, Command, ItemKind, SharedClock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access_client::{AccessSource, RemoteAccess};
use crate::history::StateStore;
use crate::http::{finish_router, json_rejection, serve, ApiError, Auth, Authenticated, PauseSwitch};
use crate::upstream::Upstream;
use crate::{Cluster, RunningService, ServiceConfig};

pub const SERVICE_NAME: &str = "remotecontrol";
pub const LOG_RING: usize = 10_000;
pub const MAX_LOG_LIMIT: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SinkError {
    #[error("broker unavailable: {0}")]
    Unavailable(String),
}

/// Where dispatched commands go.
pub trait CommandSink: Send + Sync + 'static {
    fn publish(&self, topic: String, payload: Bytes) -> BoxFuture<'_, Result<(), SinkError>>;
}

/// Publishes over a lazily (re)connected broker session, guarded by a
/// breaker so a dead broker fails fast.
pub struct MqttSink {
    broker: String,
    client_id: String,
    client: tokio::sync::Mutex<Option<MqttClient>>,
    breaker: CircuitBreaker,
}

impl MqttSink {
    pub fn new(broker: impl Into<String>, client_id: impl Into<String>, breaker: BreakerConfig, clock: SharedClock) -> Self {
        Self {
            broker: broker.into(),
            client_id: client_id.into(),
            client: tokio::sync::Mutex::new(None),
            breaker: CircuitBreaker::new(format!("{SERVICE_NAME}->broker"), breaker, clock),
        }
    }

    async fn try_publish(&self, topic: &str, payload: Bytes) -> Result<(), SinkError> {
        let mut slot = self.client.lock().await;
        if !slot.as_ref().is_some_and(MqttClient::is_connected) {
            let mut options = ClientOptions::new(self.client_id.clone());
            options.timeout = Duration::from_millis(self.breaker.config().call_timeout_ms);
            let (client, _inbound) = MqttClient::connect(&self.broker, options)
                .await
                .map_err(|e| SinkError::Unavailable(e.to_string()))?;
            *slot = Some(client);
        }
        let client = slot.as_ref().expect("connected above");
        client
            .publish(topic, payload)
            .await
            .map_err(|e| SinkError::Unavailable(e.to_string()))
    }
}

impl CommandSink for MqttSink {
    fn publish(&self, topic: String, payload: Bytes) -> BoxFuture<'_, Result<(), SinkError>> {
        Box::pin(async move {
            let permit = self
                .breaker
                .try_acquire()
                .map_err(|_| SinkError::Unavailable("circuit breaker open".into()))?;
            let timeout = Duration::from_millis(self.breaker.config().call_timeout_ms);
            let result = match tokio::time::timeout(timeout, self.try_publish(&topic, payload)).await {
                Ok(r) => r,
                Err(_) => Err(SinkError::Unavailable("publish timed out".into())),
            };
            permit.record(if result.is_ok() { Outcome::Success } else { Outcome::Failure });
            result
        })
    }
}

/// Records every publish; used to prove that denied requests cause none.
#[derive(Default)]
pub struct SpySink {
    published: Mutex<Vec<(String, Bytes)>>,
}

impl SpySink {
    pub fn published(&self) -> Vec<(String, Bytes)> {
        self.published.lock().clone()
    }

    pub fn count(&self) -> usize {
        self.published.lock().len()
    }
}

impl CommandSink for SpySink {
    fn publish(&self, topic: String, payload: Bytes) -> BoxFuture<'_, Result<(), SinkError>> {
        self.published.lock().push((topic, payload));
        Box::pin(async { Ok(()) })
    }
}

/// Item catalog used to learn an item's kind before validating a value.
#[derive(Clone)]
pub enum Catalog {
    History(Arc<Upstream>),
    Local(Arc<StateStore>),
}

impl Catalog {
    async fn kind(&self, caller: &Authenticated, home_id: &str, item_id: &str) -> Result<Option<ItemKind>, ApiError> {
        match self {
            Catalog::Local(store) => Ok(store.item_kind(home_id, item_id)),
            Catalog::History(upstream) => {
                let url_path = format!(
                    "/catalog/homes/{}/items/{}",
                    encode_segment(home_id),
                    encode_segment(item_id)
                );
                let resp = upstream
                    .send_buffered(|client, base| client.get(format!("{base}{url_path}")).bearer_auth(&caller.token))
                    .await?;
                match resp.status {
                    StatusCode::OK => {
                        let v: serde_json::Value = resp.json().ok_or_else(|| ApiError::internal("malformed catalog entry"))?;
                        let kind = serde_json::from_value(v.get("kind").cloned().unwrap_or_default())
                            .map_err(|_| ApiError::internal("malformed catalog entry"))?;
                        Ok(Some(kind))
                    }
                    StatusCode::NOT_FOUND => Ok(None),
                    StatusCode::UNAUTHORIZED => Err(ApiError::unauthorized("token rejected by history")),
                    s => Err(ApiError::unavailable("upstream-error", format!("history answered {s}"))),
                }
            }
        }
    }
}

/// Percent-encodes one path segment (item ids may contain '/').
pub fn encode_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("unknown item")]
    UnknownItem,
    #[error("value {value:?} is invalid for a {kind} item")]
    InvalidValue { kind: ItemKind, value: String },
    #[error("forbidden")]
    Forbidden,
    #[error(transparent)]
    Sink(#[from] SinkError),
    #[error("limit must be between 1 and {MAX_LOG_LIMIT}")]
    InvalidLimit,
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::UnknownItem => ApiError::not_found("unknown-item", e.to_string()),
            ControlError::InvalidValue { .. } => ApiError::bad_request("invalid-value", e.to_string()),
            ControlError::Forbidden => ApiError::forbidden(),
            ControlError::Sink(_) => ApiError::unavailable("broker-unavailable", e.to_string()),
            ControlError::InvalidLimit => ApiError::bad_request("invalid-limit", e.to_string()),
        }
    }
}

/// Recent dispatches in memory, every dispatch in a journal.
pub struct CommandLog {
    ring: Mutex<VecDeque<Command>>,
    journal: Option<Mutex<Journal<Command>>>,
}

impl CommandLog {
    pub fn in_memory() -> Self {
        Self { ring: Mutex::new(VecDeque::new()), journal: None }
    }

    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let (journal, records) = Journal::open(path.into())?;
        let skip = records.len().saturating_sub(LOG_RING);
        Ok(Self {
            ring: Mutex::new(records.into_iter().skip(skip).collect()),
            journal: Some(Mutex::new(journal)),
        })
    }

    pub fn append(&self, command: Command) {
        if let Some(j) = &self.journal {
            if let Err(e) = j.lock().append_flush(&command) {
                tracing::error!(error = %e, "command journal append failed");
            }
        }
        let mut ring = self.ring.lock();
        if ring.len() == LOG_RING {
            ring.pop_front();
        }
        ring.push_back(command);
    }

    /// Newest first.
    pub fn recent(&self, home_id: &str, limit: usize) -> Vec<Command> {
        self.ring
            .lock()
            .iter()
            .rev()
            .filter(|c| c.home_id == home_id)
            .take(limit)
            .cloned()
            .collect()
    }
}

#[derive(Clone)]
pub struct ControlState {
    pub catalog: Catalog,
    pub access: AccessSource,
    pub sink: Arc<dyn CommandSink>,
    pub log: Arc<CommandLog>,
    pub auth: Auth,
}

impl FromRef<ControlState> for Auth {
    fn from_ref(s: &ControlState) -> Auth {
        s.auth.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Dispatched {
    pub command_id: String,
    pub status: String,
}

impl ControlState {
    pub async fn send_command(
        &self,
        caller: &Authenticated,
        home_id: &str,
        item_id: &str,
        value: String,
        label: Option<String>,
    ) -> Result<Dispatched, ApiError> {
        let key = AccessItem::item(home_id, item_id).map_err(|_| ControlError::UnknownItem)?;
        let kind = self
            .catalog
            .kind(caller, home_id, item_id)
            .await?
            .ok_or(ControlError::UnknownItem)?;
        if !validate_value(kind, &value) {
            return Err(ControlError::InvalidValue { kind, value }.into());
        }
        if !self.access.check(caller, &key, AccessMode::Write).await? {
            return Err(ControlError::Forbidden.into());
        }
        let command = Command {
            command_id: uuid::Uuid::new_v4().to_string(),
            home_id: home_id.to_string(),
            item_id: item_id.to_string(),
            value,
            label,
            issued_by: caller.principal.subject.clone(),
            issued_at: self.auth.clock.now_ms(),
        };
        let payload = Bytes::from(serde_json::to_vec(&command).map_err(|e| ApiError::internal(e.to_string()))?);
        self.sink
            .publish(command_topic(home_id), payload)
            .await
            .map_err(ControlError::from)?;
        let dispatched = Dispatched { command_id: command.command_id.clone(), status: "dispatched".into() };
        tracing::info!(command = %command.command_id, home = %home_id, item = %item_id, by = %command.issued_by, "command dispatched");
        self.log.append(command);
        Ok(dispatched)
    }

    pub async fn command_log(&self, caller: &Authenticated, home_id: &str, limit: usize) -> Result<Vec<Command>, ApiError> {
        if limit == 0 || limit > MAX_LOG_LIMIT {
            return Err(ControlError::InvalidLimit.into());
        }
        let key = AccessItem::home(home_id).map_err(|_| ControlError::Forbidden)?;
        if !self.access.check(caller, &key, AccessMode::Read).await? {
            return Err(ControlError::Forbidden.into());
        }
        Ok(self.log.recent(home_id, limit))
    }
}

#[derive(Deserialize)]
struct CommandBody {
    value: String,
    label: Option<String>,
}

#[derive(Deserialize)]
struct LogQuery {
    limit: Option<usize>,
}

async fn post_command(
    State(s): State<ControlState>,
    caller: Authenticated,
    Path((home, item)): Path<(String, String)>,
    body: Result<Json<CommandBody>, JsonRejection>,
) -> Result<(StatusCode, Json<Dispatched>), ApiError> {
    let Json(b) = body.map_err(json_rejection)?;
    let d = s.send_command(&caller, &home, &item, b.value, b.label).await?;
    Ok((StatusCode::ACCEPTED, Json(d)))
}

async fn get_log(
    State(s): State<ControlState>,
    caller: Authenticated,
    Path(home): Path<String>,
    q: Result<Query<LogQuery>, QueryRejection>,
) -> Result<Json<Vec<Command>>, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::bad_request("malformed-request", e.body_text()))?;
    Ok(Json(s.command_log(&caller, &home, q.limit.unwrap_or(50)).await?))
}

pub fn router(state: ControlState) -> Router {
    Router::new()
        .route("/control/homes/{home}/items/{item}/command", post(post_command))
        .route("/control/homes/{home}/commands", get(get_log))
        .with_state(state)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ControlConfig {
    #[serde(flatten)]
    pub service: ServiceConfig,
    pub broker: String,
    pub access_cache_ms: u64,
    /// Defaults to `<dataDir>/commands.jsonl`.
    pub command_journal: Option<PathBuf>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            service: ServiceConfig::with_port(7004),
            broker: "127.0.0.1:1883".into(),
            access_cache_ms: 2_000,
            command_journal: None,
        }
    }
}

pub async fn start(config: ControlConfig, clock: SharedClock) -> std::io::Result<RunningService> {
    let cluster = Cluster::new(SERVICE_NAME, &config.service, clock.clone());
    let listener = tokio::net::TcpListener::bind(config.service.bind).await?;
    let addr = listener.local_addr()?;
    let instance_id = config.service.instance_id(SERVICE_NAME, addr);
    let journal = config
        .command_journal
        .clone()
        .unwrap_or_else(|| config.service.data_dir.join("commands.jsonl"));
    let state = ControlState {
        catalog: Catalog::History(cluster.upstream(crate::history::SERVICE_NAME)),
        access: AccessSource::Remote(Arc::new(RemoteAccess::new(
            cluster.upstream(crate::access::SERVICE_NAME),
            Duration::from_millis(config.access_cache_ms),
        ))),
        sink: Arc::new(MqttSink::new(config.broker.clone(), instance_id.clone(), config.service.breaker, clock.clone())),
        log: Arc::new(CommandLog::open(journal)?),
        auth: Auth::new(&config.service.token_secret, clock),
    };
    let pause = PauseSwitch::default();
    let server = serve(listener, finish_router(router(state), &instance_id, pause.clone()));
    let lease = cluster.lease(&config.service, addr, &instance_id);
    tracing::info!(%addr, "remote control listening");
    Ok(RunningService::new(SERVICE_NAME, instance_id, addr, pause, vec![server, lease]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_encoding() {
        assert_eq!(encode_segment("lamp"), "lamp");
        assert_eq!(encode_segment("kitchen/light"), "kitchen%2Flight");
        assert_eq!(encode_segment("a b"), "a%20b");
    }

    #[test]
    fn log_is_newest_first_and_per_home() {
        let log = CommandLog::in_memory();
        for (i, home) in ["h1", "h2", "h1", "h1"].iter().enumerate() {
            log.append(Command {
                command_id: i.to_string(),
                home_id: home.to_string(),
                item_id: "lamp".into(),
                value: "ON".into(),
                label: None,
                issued_by: "mia".into(),
                issued_at: i as u64,
            });
        }
        let ids: Vec<String> = log.recent("h1", 10).into_iter().map(|c| c.command_id).collect();
        assert_eq!(ids, vec!["3", "2", "0"]);
        assert_eq!(log.recent("h1", 1)[0].command_id, "3");
    }

    #[test]
    fn log_replays_from_journal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let cmd = Command {
            command_id: "x".into(),
            home_id: "h".into(),
            item_id: "i".into(),
            value: "ON".into(),
            label: Some("evening".into()),
            issued_by: "mia".into(),
            issued_at: 1,
        };
        CommandLog::open(&path).unwrap().append(cmd.clone());
        assert_eq!(CommandLog::open(&path).unwrap().recent("h", 5), vec![cmd]);
    }
}
