//! History: telemetry ingestion from the broker, bounded per-item state
//! histories, and access-gated queries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::convert::Infallible;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::QueryRejection;
use axum::extract::{FromRef, Path, Query, State};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::routing::get;
use axum::{Json, Router};
use futures::Stream;
use parking_lot::{Mutex, RwLock};
use rca_broker::{parse_state_topic, ClientOptions, MqttClient};
use rca_core::domain::{is_valid_home_id, is_valid_item_id};
use rca_core::journal::Journal;
use rca_core::{validate_value, AccessItem, AccessMode, DeviceItem, DeviceState, ItemKind, SharedClock, SmartHome};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::access_client::{AccessSource, RemoteAccess};
use crate::http::{finish_router, serve, ApiError, Auth, Authenticated, PauseSwitch};
use crate::{Cluster, RunningService, ServiceConfig};

pub const SERVICE_NAME: &str = "history";
pub const DEFAULT_CAP: usize = 10_000;
pub const MAX_QUERY_LIMIT: usize = 1_000;

/// Wire payload on `rca/state/{homeId}/{itemId}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Telemetry {
    pub value: String,
    pub timestamp: u64,
    /// Optional declaration of the item's kind, used when the item is
    /// first seen (or is still untyped).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ItemKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("topic is not a state topic")]
    Topic,
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error("value {value:?} invalid for {kind}")]
    Value { kind: ItemKind, value: String },
}

/// A state accepted into the store, as broadcast to live subscribers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StateEvent {
    pub home_id: String,
    pub item_id: String,
    pub kind: ItemKind,
    #[serde(flatten)]
    pub state: DeviceState,
}

struct ItemHistory {
    kind: ItemKind,
    label: String,
    /// Keyed by (timestamp, seq): the last entry is the current state and
    /// the first is the next to evict.
    states: BTreeMap<(u64, u64), String>,
}

impl ItemHistory {
    fn new(kind: ItemKind, label: String) -> Self {
        Self { kind, label, states: BTreeMap::new() }
    }

    fn current(&self) -> Option<DeviceState> {
        self.states
            .last_key_value()
            .map(|(&(timestamp, seq), value)| DeviceState { timestamp, value: value.clone(), seq })
    }
}

#[derive(Default)]
struct HomeEntry {
    label: String,
    items: BTreeMap<String, ItemHistory>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ItemView {
    pub item_id: String,
    pub kind: ItemKind,
    pub label: String,
    pub state: Option<DeviceState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HomeView {
    pub home_id: String,
    pub label: String,
    pub items: Vec<ItemView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HomeSummary {
    pub home_id: String,
    pub label: String,
    pub item_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JournalRecord {
    h: String,
    i: String,
    k: ItemKind,
    t: u64,
    s: u64,
    v: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Snapshot {
    max_seq: u64,
    homes: Vec<SmartHome>,
}

/// In-memory repository of homes and their item histories.
pub struct StateStore {
    homes: RwLock<BTreeMap<String, HomeEntry>>,
    seq: AtomicU64,
    cap: usize,
}

impl StateStore {
    pub fn new(cap: usize) -> Self {
        Self { homes: RwLock::new(BTreeMap::new()), seq: AtomicU64::new(0), cap: cap.max(1) }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn last_seq(&self) -> u64 {
        self.seq.load(Ordering::Acquire)
    }

    /// Parses and stores one telemetry message.
    pub fn ingest(&self, topic: &str, payload: &[u8]) -> Result<StateEvent, IngestError> {
        let (home_id, item_id) = parse_state_topic(topic).ok_or(IngestError::Topic)?;
        if !is_valid_home_id(home_id) || !is_valid_item_id(item_id) {
            return Err(IngestError::Topic);
        }
        let t: Telemetry = serde_json::from_slice(payload).map_err(|e| IngestError::Payload(e.to_string()))?;
        self.accept(home_id, item_id, t)
    }

    pub fn accept(&self, home_id: &str, item_id: &str, t: Telemetry) -> Result<StateEvent, IngestError> {
        let mut homes = self.homes.write();
        let existing_kind = homes.get(home_id).and_then(|h| h.items.get(item_id)).map(|i| i.kind);
        let kind = match (existing_kind, t.kind) {
            (None, declared) => declared.unwrap_or(ItemKind::Text),
            (Some(ItemKind::Text), Some(declared)) => declared,
            (Some(k), _) => k,
        };
        if !validate_value(kind, &t.value) {
            return Err(IngestError::Value { kind, value: t.value });
        }
        let seq = self.seq.fetch_add(1, Ordering::AcqRel) + 1;
        self.insert_locked(&mut homes, home_id, item_id, kind, t.timestamp, seq, t.value.clone());
        Ok(StateEvent {
            home_id: home_id.to_string(),
            item_id: item_id.to_string(),
            kind,
            state: DeviceState { timestamp: t.timestamp, value: t.value, seq },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn insert_locked(
        &self,
        homes: &mut BTreeMap<String, HomeEntry>,
        home_id: &str,
        item_id: &str,
        kind: ItemKind,
        timestamp: u64,
        seq: u64,
        value: String,
    ) {
        let home = homes.entry(home_id.to_string()).or_insert_with(|| HomeEntry {
            label: home_id.to_string(),
            items: BTreeMap::new(),
        });
        let item = home
            .items
            .entry(item_id.to_string())
            .or_insert_with(|| ItemHistory::new(kind, item_id.to_string()));
        item.kind = kind;
        item.states.insert((timestamp, seq), value);
        while item.states.len() > self.cap {
            item.states.pop_first();
        }
    }

    fn replay(&self, r: JournalRecord) {
        let mut homes = self.homes.write();
        self.seq.fetch_max(r.s, Ordering::AcqRel);
        self.insert_locked(&mut homes, &r.h, &r.i, r.k, r.t, r.s, r.v);
    }

    pub fn home_exists(&self, home_id: &str) -> bool {
        self.homes.read().contains_key(home_id)
    }

    pub fn item_kind(&self, home_id: &str, item_id: &str) -> Option<ItemKind> {
        self.homes.read().get(home_id)?.items.get(item_id).map(|i| i.kind)
    }

    pub fn current_state(&self, home_id: &str, item_id: &str) -> Option<DeviceState> {
        self.homes.read().get(home_id)?.items.get(item_id)?.current()
    }

    /// Home view restricted to items accepted by `keep`.
    pub fn home_view(&self, home_id: &str, keep: impl Fn(&str) -> bool) -> Option<HomeView> {
        let homes = self.homes.read();
        let home = homes.get(home_id)?;
        Some(HomeView {
            home_id: home_id.to_string(),
            label: home.label.clone(),
            items: home
                .items
                .iter()
                .filter(|(id, _)| keep(id))
                .map(|(id, item)| ItemView {
                    item_id: id.clone(),
                    kind: item.kind,
                    label: item.label.clone(),
                    state: item.current(),
                })
                .collect(),
        })
    }

    pub fn item_ids(&self, home_id: &str) -> Vec<String> {
        self.homes
            .read()
            .get(home_id)
            .map(|h| h.items.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn summary(&self, home_id: &str) -> Option<HomeSummary> {
        self.homes.read().get(home_id).map(|h| HomeSummary {
            home_id: home_id.to_string(),
            label: h.label.clone(),
            item_count: h.items.len(),
        })
    }

    /// States with `from <= timestamp <= to`, ascending, keeping the newest
    /// `limit`.
    pub fn history(&self, home_id: &str, item_id: &str, from: u64, to: u64, limit: usize) -> Option<Vec<DeviceState>> {
        let homes = self.homes.read();
        let item = homes.get(home_id)?.items.get(item_id)?;
        let mut out: Vec<DeviceState> = item
            .states
            .range((from, 0)..=(to, u64::MAX))
            .rev()
            .take(limit)
            .map(|(&(timestamp, seq), value)| DeviceState { timestamp, value: value.clone(), seq })
            .collect();
        out.reverse();
        Some(out)
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let homes = self.homes.read();
        let items = homes.values().map(|h| h.items.len()).sum();
        let states = homes.values().flat_map(|h| h.items.values()).map(|i| i.states.len()).sum();
        (homes.len(), items, states)
    }

    fn snapshot(&self) -> Snapshot {
        let homes = self.homes.read();
        Snapshot {
            max_seq: self.last_seq(),
            homes: homes
                .iter()
                .map(|(id, h)| SmartHome {
                    home_id: id.clone(),
                    label: h.label.clone(),
                    items: h
                        .items
                        .iter()
                        .map(|(iid, item)| {
                            let states = item
                                .states
                                .iter()
                                .map(|(&(timestamp, seq), value)| DeviceState { timestamp, value: value.clone(), seq })
                                .collect();
                            (iid.clone(), DeviceItem { item_id: iid.clone(), kind: item.kind, label: item.label.clone(), states })
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn restore(&self, snapshot: Snapshot) {
        let mut homes = self.homes.write();
        for home in snapshot.homes {
            let entry = homes.entry(home.home_id.clone()).or_default();
            entry.label = home.label;
            for (id, item) in home.items {
                let mut h = ItemHistory::new(item.kind, item.label);
                h.states = item.states.into_iter().map(|s| ((s.timestamp, s.seq), s.value)).collect();
                while h.states.len() > self.cap {
                    h.states.pop_first();
                }
                entry.items.insert(id, h);
            }
        }
        self.seq.fetch_max(snapshot.max_seq, Ordering::AcqRel);
    }
}

/// Journal + snapshot persistence and the dead-letter file.
pub struct Persistence {
    journal: Journal<JournalRecord>,
    snapshot_path: PathBuf,
    dead_letters: BufWriter<std::fs::File>,
}

impl Persistence {
    /// Restores `store` from snapshot and journal, then opens for appending.
    pub fn open(dir: &FsPath, store: &StateStore) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let snapshot_path = dir.join("history-snapshot.json");
        let mut max_seq = 0;
        if snapshot_path.exists() {
            match serde_json::from_slice::<Snapshot>(&std::fs::read(&snapshot_path)?) {
                Ok(s) => {
                    max_seq = s.max_seq;
                    store.restore(s);
                }
                Err(e) => tracing::warn!(error = %e, "ignoring unreadable snapshot"),
            }
        }
        let (journal, records) = Journal::<JournalRecord>::open(dir.join("history-journal.jsonl"))?;
        for r in records.into_iter().filter(|r| r.s > max_seq) {
            store.replay(r);
        }
        let dead_letters = BufWriter::new(
            OpenOptions::new().create(true).append(true).open(dir.join("history-deadletter.jsonl"))?,
        );
        Ok(Self { journal, snapshot_path, dead_letters })
    }

    fn record(&mut self, e: &StateEvent) {
        let r = JournalRecord {
            h: e.home_id.clone(),
            i: e.item_id.clone(),
            k: e.kind,
            t: e.state.timestamp,
            s: e.state.seq,
            v: e.state.value.clone(),
        };
        if let Err(err) = self.journal.append(&r) {
            tracing::error!(error = %err, "journal append failed");
        }
    }

    fn dead_letter(&mut self, at: u64, topic: &str, payload: &[u8], reason: &str) {
        let line = serde_json::json!({
            "at": at,
            "topic": topic,
            "payload": String::from_utf8_lossy(payload),
            "reason": reason,
        });
        let _ = serde_json::to_writer(&mut self.dead_letters, &line);
        let _ = self.dead_letters.write_all(b"\n");
    }

    fn flush(&mut self) {
        let _ = self.journal.flush();
        let _ = self.dead_letters.flush();
    }

    /// Writes a snapshot atomically, then truncates the journal. Only the
    /// ingestion task calls this, so no accepted state can fall between.
    fn snapshot(&mut self, store: &StateStore) -> std::io::Result<()> {
        self.journal.flush()?;
        let tmp = self.snapshot_path.with_extension("json.tmp");
        let file = std::fs::File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &store.snapshot())?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, &self.snapshot_path)?;
        self.journal.truncate()
    }
}

#[derive(Debug, Default, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "camelCase")]
pub struct IngestStats {
    pub received: u64,
    pub accepted: u64,
    pub dead_letters: u64,
}

/// Ingestion front end: store, persistence, counters and live fan-out.
pub struct Ingestor {
    pub store: Arc<StateStore>,
    persistence: Mutex<Option<Persistence>>,
    received: AtomicU64,
    accepted: AtomicU64,
    dead_letters: AtomicU64,
    events: broadcast::Sender<Arc<StateEvent>>,
    clock: SharedClock,
}

impl Ingestor {
    pub fn new(store: Arc<StateStore>, persistence: Option<Persistence>, clock: SharedClock) -> Self {
        Self {
            store,
            persistence: Mutex::new(persistence),
            received: AtomicU64::new(0),
            accepted: AtomicU64::new(0),
            dead_letters: AtomicU64::new(0),
            events: broadcast::channel(4096).0,
            clock,
        }
    }

    /// Never fails: poison messages are counted and dead-lettered.
    pub fn handle(&self, topic: &str, payload: &[u8]) {
        self.received.fetch_add(1, Ordering::Relaxed);
        match self.store.ingest(topic, payload) {
            Ok(event) => {
                if let Some(p) = self.persistence.lock().as_mut() {
                    p.record(&event);
                }
                self.accepted.fetch_add(1, Ordering::Relaxed);
                let _ = self.events.send(Arc::new(event));
            }
            Err(e) => {
                self.dead_letters.fetch_add(1, Ordering::Relaxed);
                tracing::debug!(%topic, error = %e, "dead-lettered telemetry");
                if let Some(p) = self.persistence.lock().as_mut() {
                    p.dead_letter(self.clock.now_ms(), topic, payload, &e.to_string());
                }
            }
        }
    }

    pub fn stats(&self) -> IngestStats {
        IngestStats {
            received: self.received.load(Ordering::Relaxed),
            accepted: self.accepted.load(Ordering::Relaxed),
            dead_letters: self.dead_letters.load(Ordering::Relaxed),
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<StateEvent>> {
        self.events.subscribe()
    }

    pub fn flush(&self) {
        if let Some(p) = self.persistence.lock().as_mut() {
            p.flush();
        }
    }

    pub fn snapshot(&self) -> std::io::Result<()> {
        match self.persistence.lock().as_mut() {
            Some(p) => p.snapshot(&self.store),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("forbidden")]
    Forbidden,
    #[error("no such home")]
    HomeNotFound,
    #[error("no such item")]
    ItemNotFound,
    #[error("from must not exceed to")]
    InvalidRange,
    #[error("limit must be between 1 and {MAX_QUERY_LIMIT}")]
    InvalidLimit,
}

impl From<HistoryError> for ApiError {
    fn from(e: HistoryError) -> Self {
        match e {
            HistoryError::Forbidden => ApiError::forbidden(),
            HistoryError::HomeNotFound => ApiError::not_found("not-found", e.to_string()),
            HistoryError::ItemNotFound => ApiError::not_found("unknown-item", e.to_string()),
            HistoryError::InvalidRange => ApiError::bad_request("invalid-range", e.to_string()),
            HistoryError::InvalidLimit => ApiError::bad_request("invalid-limit", e.to_string()),
        }
    }
}

#[derive(Clone)]
pub struct HistoryState {
    pub ingestor: Arc<Ingestor>,
    pub access: AccessSource,
    pub auth: Auth,
}

impl FromRef<HistoryState> for Auth {
    fn from_ref(s: &HistoryState) -> Auth {
        s.auth.clone()
    }
}

fn item_key(home_id: &str, item_id: &str) -> Result<AccessItem, ApiError> {
    AccessItem::item(home_id, item_id).map_err(|e| ApiError::bad_request("malformed-access-item", e.to_string()))
}

impl HistoryState {
    fn store(&self) -> &StateStore {
        &self.ingestor.store
    }

    pub async fn get_home(&self, caller: &Authenticated, home_id: &str) -> Result<HomeView, ApiError> {
        let home_key = AccessItem::home(home_id).map_err(|_| HistoryError::Forbidden)?;
        if self.access.check(caller, &home_key, AccessMode::Read).await? {
            return Ok(self.store().home_view(home_id, |_| true).ok_or(HistoryError::HomeNotFound)?);
        }
        if !self.store().home_exists(home_id) {
            return Err(HistoryError::Forbidden.into());
        }
        let readable: BTreeSet<String> = self
            .access
            .grants(caller)
            .await?
            .into_iter()
            .filter(|g| g.mode == AccessMode::Read && g.access_item.home_id() == home_id)
            .filter_map(|g| g.access_item.item_id().map(str::to_string))
            .collect();
        match self.store().home_view(home_id, |id| readable.contains(id)) {
            Some(view) if !view.items.is_empty() => Ok(view),
            _ => Err(HistoryError::Forbidden.into()),
        }
    }

    pub async fn list_homes(&self, caller: &Authenticated) -> Result<Vec<HomeSummary>, ApiError> {
        let mut homes = BTreeSet::new();
        for g in self.access.grants(caller).await? {
            if g.mode != AccessMode::Read {
                continue;
            }
            let home = g.access_item.home_id();
            let visible = match g.access_item.item_id() {
                None => self.store().home_exists(home),
                Some(item) => self.store().item_kind(home, item).is_some(),
            };
            if visible {
                homes.insert(home.to_string());
            }
        }
        Ok(homes.iter().filter_map(|h| self.store().summary(h)).collect())
    }

    async fn require_item_read(&self, caller: &Authenticated, home_id: &str, item_id: &str) -> Result<(), ApiError> {
        let key = item_key(home_id, item_id)?;
        if !self.access.check(caller, &key, AccessMode::Read).await? {
            return Err(HistoryError::Forbidden.into());
        }
        if self.store().item_kind(home_id, item_id).is_none() {
            return Err(HistoryError::ItemNotFound.into());
        }
        Ok(())
    }

    pub async fn item_history(
        &self,
        caller: &Authenticated,
        home_id: &str,
        item_id: &str,
        from: u64,
        to: u64,
        limit: usize,
    ) -> Result<Vec<DeviceState>, ApiError> {
        if from > to {
            return Err(HistoryError::InvalidRange.into());
        }
        if limit == 0 || limit > MAX_QUERY_LIMIT {
            return Err(HistoryError::InvalidLimit.into());
        }
        self.require_item_read(caller, home_id, item_id).await?;
        Ok(self.store().history(home_id, item_id, from, to, limit).unwrap_or_default())
    }
}

#[derive(Deserialize)]
struct RangeQuery {
    from: Option<u64>,
    to: Option<u64>,
    limit: Option<usize>,
}

async fn list_homes(State(s): State<HistoryState>, caller: Authenticated) -> Result<Json<Vec<HomeSummary>>, ApiError> {
    Ok(Json(s.list_homes(&caller).await?))
}

async fn get_home(State(s): State<HistoryState>, caller: Authenticated, Path(home): Path<String>) -> Result<Json<HomeView>, ApiError> {
    Ok(Json(s.get_home(&caller, &home).await?))
}

async fn get_history(
    State(s): State<HistoryState>,
    caller: Authenticated,
    Path((home, item)): Path<(String, String)>,
    q: Result<Query<RangeQuery>, QueryRejection>,
) -> Result<Json<Vec<DeviceState>>, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::bad_request("malformed-request", e.body_text()))?;
    let states = s
        .item_history(&caller, &home, &item, q.from.unwrap_or(0), q.to.unwrap_or(u64::MAX), q.limit.unwrap_or(MAX_QUERY_LIMIT))
        .await?;
    Ok(Json(states))
}

async fn item_events(
    State(s): State<HistoryState>,
    caller: Authenticated,
    Path((home, item)): Path<(String, String)>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    s.require_item_read(&caller, &home, &item).await?;
    let rx = s.ingestor.subscribe();
    let stream = futures::stream::unfold(rx, move |mut rx| {
        let (home, item) = (home.clone(), item.clone());
        async move {
            loop {
                match rx.recv().await {
                    Ok(e) if e.home_id == home && e.item_id == item => {
                        let event = Event::default().event("state").json_data(&*e).unwrap_or_default();
                        return Some((Ok(event), rx));
                    }
                    Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

/// Item kind lookup used by remote control before dispatching a command.
async fn catalog_item(
    State(s): State<HistoryState>,
    _caller: Authenticated,
    Path((home, item)): Path<(String, String)>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let kind = s.store().item_kind(&home, &item).ok_or(HistoryError::ItemNotFound)?;
    Ok(Json(serde_json::json!({ "homeId": home, "itemId": item, "kind": kind })))
}

async fn stats(State(s): State<HistoryState>, _caller: Authenticated) -> Json<serde_json::Value> {
    let (homes, items, states) = s.store().counts();
    let ingest = s.ingestor.stats();
    Json(serde_json::json!({
        "homes": homes,
        "items": items,
        "states": states,
        "lastSeq": s.store().last_seq(),
        "received": ingest.received,
        "accepted": ingest.accepted,
        "deadLetters": ingest.dead_letters,
    }))
}

pub fn router(state: HistoryState) -> Router {
    Router::new()
        .route("/homes", get(list_homes))
        .route("/homes/{home}", get(get_home))
        .route("/homes/{home}/items/{item}/history", get(get_history))
        .route("/homes/{home}/items/{item}/events", get(item_events))
        .route("/catalog/homes/{home}/items/{item}", get(catalog_item))
        .route("/stats", get(stats))
        .with_state(state)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct HistoryConfig {
    #[serde(flatten)]
    pub service: ServiceConfig,
    pub broker: String,
    pub history_cap: usize,
    pub snapshot_interval_ms: u64,
    pub access_cache_ms: u64,
    pub persist: bool,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        Self {
            service: ServiceConfig::with_port(7003),
            broker: "127.0.0.1:1883".into(),
            history_cap: DEFAULT_CAP,
            snapshot_interval_ms: 60_000,
            access_cache_ms: 2_000,
            persist: true,
        }
    }
}

/// Subscribes to all state topics and feeds the ingestor, reconnecting
/// with capped exponential backoff.
pub fn spawn_consumer(
    broker: String,
    client_id: String,
    ingestor: Arc<Ingestor>,
    snapshot_every: Duration,
) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut backoff = Duration::from_millis(500);
        let mut flush = tokio::time::interval(Duration::from_millis(200));
        let mut snapshot = tokio::time::interval(snapshot_every.max(Duration::from_secs(1)));
        snapshot.tick().await;
        loop {
            let mut options = ClientOptions::new(client_id.clone());
            options.inbound_capacity = 65_536;
            let (client, mut rx) = match MqttClient::connect(&broker, options).await {
                Ok(c) => c,
                Err(e) => {
                    tracing::warn!(%broker, error = %e, "broker unavailable, retrying");
                    tokio::time::sleep(backoff).await;
                    backoff = (backoff * 2).min(Duration::from_secs(8));
                    continue;
                }
            };
            if let Err(e) = client.subscribe(&["rca/state/#"]).await {
                tracing::warn!(error = %e, "subscribe failed");
                continue;
            }
            backoff = Duration::from_millis(500);
            tracing::info!(%broker, "ingesting telemetry");
            loop {
                tokio::select! {
                    msg = rx.recv() => match msg {
                        Some(m) => ingestor.handle(&m.topic, &m.payload),
                        None => break,
                    },
                    _ = flush.tick() => ingestor.flush(),
                    _ = snapshot.tick() => {
                        if let Err(e) = ingestor.snapshot() {
                            tracing::error!(error = %e, "snapshot failed");
                        }
                    }
                }
            }
            tracing::warn!("broker connection lost");
            ingestor.flush();
        }
    })
}

/// A started history service together with its ingestion front end.
pub struct RunningHistory {
    pub service: RunningService,
    pub ingestor: Arc<Ingestor>,
}

pub async fn start(config: HistoryConfig, clock: SharedClock) -> std::io::Result<RunningHistory> {
    let cluster = Cluster::new(SERVICE_NAME, &config.service, clock.clone());
    let access = AccessSource::Remote(Arc::new(RemoteAccess::new(
        cluster.upstream(crate::access::SERVICE_NAME),
        Duration::from_millis(config.access_cache_ms),
    )));
    start_with_access(config, clock, access, Some(cluster)).await
}

/// Starts with an explicit access source; without a cluster the service
/// does not register with discovery.
pub async fn start_with_access(
    config: HistoryConfig,
    clock: SharedClock,
    access: AccessSource,
    cluster: Option<Cluster>,
) -> std::io::Result<RunningHistory> {
    let store = Arc::new(StateStore::new(config.history_cap));
    let listener = tokio::net::TcpListener::bind(config.service.bind).await?;
    let addr = listener.local_addr()?;
    let instance_id = config.service.instance_id(SERVICE_NAME, addr);
    let persistence = if config.persist {
        Some(Persistence::open(&config.service.data_dir.join(&instance_id), &store)?)
    } else {
        None
    };
    let ingestor = Arc::new(Ingestor::new(store, persistence, clock.clone()));
    let state = HistoryState { ingestor: ingestor.clone(), access, auth: Auth::new(&config.service.token_secret, clock) };
    let pause = PauseSwitch::default();
    let server = serve(listener, finish_router(router(state), &instance_id, pause.clone()));
    let consumer = spawn_consumer(
        config.broker.clone(),
        instance_id.clone(),
        ingestor.clone(),
        Duration::from_millis(config.snapshot_interval_ms),
    );
    let mut tasks = vec![server, consumer];
    if let Some(cluster) = cluster {
        tasks.push(cluster.lease(&config.service, addr, &instance_id));
    }
    tracing::info!(%addr, "history listening");
    Ok(RunningHistory {
        service: RunningService::new(SERVICE_NAME, instance_id, addr, pause, tasks),
        ingestor,
    })
}

/// Convenience for tests: counts per (home, item) of stored states.
pub fn state_counts(store: &StateStore) -> HashMap<(String, String), usize> {
    store
        .homes
        .read()
        .iter()
        .flat_map(|(h, home)| home.items.iter().map(move |(i, item)| ((h.clone(), i.clone()), item.states.len())))
        .collect()
}

#[cfg(test)]
mod tests {
    use rca_core::{current_state, ManualClock};

    use super::*;

    fn payload(value: &str, ts: u64) -> Vec<u8> {
        serde_json::to_vec(&Telemetry { value: value.into(), timestamp: ts, kind: None }).unwrap()
    }

    #[test]
    fn ingest_examples() {
        let store = StateStore::new(DEFAULT_CAP);
        store.ingest("rca/state/h1/lamp", &payload("ON", 1000)).unwrap();
        assert_eq!(store.current_state("h1", "lamp").unwrap().value, "ON");
        assert!(matches!(store.ingest("rca/state/h1/lamp", b"{oops"), Err(IngestError::Payload(_))));
        store.ingest("rca/state/h1/t", &payload("a", 9)).unwrap();
        store.ingest("rca/state/h1/t", &payload("b", 5)).unwrap();
        assert_eq!(store.current_state("h1", "t").unwrap().value, "a");
    }

    #[test]
    fn unknown_items_default_to_text_and_upgrade_on_declared_kind() {
        let store = StateStore::new(10);
        store.ingest("rca/state/h1/x", &payload("hello", 1)).unwrap();
        assert_eq!(store.item_kind("h1", "x"), Some(ItemKind::Text));
        let typed = serde_json::to_vec(&Telemetry { value: "40".into(), timestamp: 2, kind: Some(ItemKind::Dimmer) }).unwrap();
        store.ingest("rca/state/h1/x", &typed).unwrap();
        assert_eq!(store.item_kind("h1", "x"), Some(ItemKind::Dimmer));
        assert!(matches!(store.ingest("rca/state/h1/x", &payload("abc", 3)), Err(IngestError::Value { .. })));
        // A declared kind never overrides an established non-text kind.
        let other = serde_json::to_vec(&Telemetry { value: "ON".into(), timestamp: 4, kind: Some(ItemKind::Switch) }).unwrap();
        assert!(store.ingest("rca/state/h1/x", &other).is_err());
    }

    #[test]
    fn bad_topics_are_rejected() {
        let store = StateStore::new(10);
        for t in ["rca/command/h1", "rca/state/h1", "other/h1/x", "rca/state/h 1/x"] {
            assert_eq!(store.ingest(t, &payload("1", 1)), Err(IngestError::Topic), "{t}");
        }
    }

    #[test]
    fn cap_evicts_lowest_timestamp_seq() {
        let store = StateStore::new(3);
        for (i, ts) in [50, 10, 40, 20, 30].iter().enumerate() {
            store.ingest("rca/state/h/i", &payload(&format!("v{i}"), *ts)).unwrap();
        }
        let kept: Vec<u64> = store.history("h", "i", 0, u64::MAX, 10).unwrap().iter().map(|s| s.timestamp).collect();
        assert_eq!(kept, vec![30, 40, 50]);
    }

    #[test]
    fn history_range_and_limit() {
        let store = StateStore::new(100);
        for ts in 1..=5 {
            store.ingest("rca/state/h/i", &payload(&ts.to_string(), ts)).unwrap();
        }
        let last_two: Vec<u64> = store.history("h", "i", 0, u64::MAX, 2).unwrap().iter().map(|s| s.timestamp).collect();
        assert_eq!(last_two, vec![4, 5]);
        let mid: Vec<u64> = store.history("h", "i", 2, 4, 10).unwrap().iter().map(|s| s.timestamp).collect();
        assert_eq!(mid, vec![2, 3, 4]);
    }

    #[test]
    fn current_state_agrees_with_domain_rule() {
        let store = StateStore::new(1000);
        let mut all = Vec::new();
        for i in 0..200u64 {
            let ts = (i * 7919) % 37;
            let e = store.ingest("rca/state/h/i", &payload(&i.to_string(), ts)).unwrap();
            all.push(e.state);
        }
        assert_eq!(store.current_state("h", "i").as_ref(), current_state(&all));
    }

    #[test]
    fn persistence_round_trip_with_snapshot_and_journal() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        {
            let store = Arc::new(StateStore::new(100));
            let p = Persistence::open(dir.path(), &store).unwrap();
            let ing = Ingestor::new(store, Some(p), clock.shared());
            ing.handle("rca/state/h/a", &payload("1", 1));
            ing.handle("rca/state/h/a", &payload("2", 2));
            ing.snapshot().unwrap();
            ing.handle("rca/state/h/b", &payload("3", 3));
            ing.handle("rca/state/h/b", b"garbage");
            ing.flush();
            assert_eq!(ing.stats(), IngestStats { received: 4, accepted: 3, dead_letters: 1 });
        }
        let store = StateStore::new(100);
        let _p = Persistence::open(dir.path(), &store).unwrap();
        assert_eq!(store.history("h", "a", 0, u64::MAX, 10).unwrap().len(), 2);
        assert_eq!(store.current_state("h", "b").unwrap().value, "3");
        assert_eq!(store.last_seq(), 3);
        let dl = std::fs::read_to_string(dir.path().join("history-deadletter.jsonl")).unwrap();
        assert_eq!(dl.lines().count(), 1);
    }

    #[test]
    fn replay_skips_records_already_in_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let store = StateStore::new(100);
        store.ingest("rca/state/h/a", &payload("1", 1)).unwrap();
        let snap = store.snapshot();
        std::fs::write(dir.path().join("history-snapshot.json"), serde_json::to_vec(&snap).unwrap()).unwrap();
        // Simulates a crash between snapshot rename and journal truncation.
        let line = serde_json::to_string(&JournalRecord { h: "h".into(), i: "a".into(), k: ItemKind::Text, t: 1, s: 1, v: "1".into() }).unwrap();
        std::fs::write(dir.path().join("history-journal.jsonl"), format!("{line}\n")).unwrap();
        let restored = StateStore::new(100);
        Persistence::open(dir.path(), &restored).unwrap();
        assert_eq!(restored.history("h", "a", 0, u64::MAX, 10).unwrap().len(), 1);
    }
}
