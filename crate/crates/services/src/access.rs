//! Access control: explicit read/write grants over access items.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRef, Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use rca_core::journal::Journal;
use rca_core::{AccessItem, AccessMode, Principal, SharedClock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{finish_router, json_rejection, serve, ApiError, Auth, Authenticated, PauseSwitch};
use crate::upstream::{Upstream, UpstreamError};
use crate::{Cluster, RunningService, ServiceConfig};

pub const SERVICE_NAME: &str = "accesscontrol";
pub const AUDIT_RING: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Grant {
    pub username: String,
    pub access_item: AccessItem,
    pub mode: AccessMode,
    pub granted_by: String,
    pub granted_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "camelCase")]
enum GrantEvent {
    Granted(Grant),
    #[serde(rename_all = "camelCase")]
    Revoked { username: String, access_item: AccessItem, mode: AccessMode, revoked_by: String, at: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccessError {
    #[error("forbidden")]
    Forbidden,
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("malformed access item: {0}")]
    MalformedItem(String),
    #[error("grant store unavailable: {0}")]
    Storage(String),
    #[error(transparent)]
    Upstream(#[from] UpstreamError),
}

impl From<AccessError> for ApiError {
    fn from(e: AccessError) -> Self {
        match e {
            AccessError::Forbidden => ApiError::forbidden(),
            AccessError::UnknownUser(_) => ApiError::not_found("unknown-user", e.to_string()),
            AccessError::MalformedItem(_) => ApiError::bad_request("malformed-access-item", e.to_string()),
            AccessError::Storage(m) => ApiError::internal(m),
            AccessError::Upstream(u) => u.to_api_error(),
        }
    }
}

type GrantKey = (String, AccessItem, AccessMode);

/// Grant set backed by an event journal. Checks share a read lock;
/// mutations hold the journal lock, then publish under the write lock.
pub struct GrantStore {
    grants: RwLock<BTreeMap<GrantKey, Grant>>,
    journal: Mutex<Journal<GrantEvent>>,
}

impl GrantStore {
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let (journal, events) = Journal::open(path.into())?;
        let mut grants = BTreeMap::new();
        for event in events {
            match event {
                GrantEvent::Granted(g) => {
                    grants.entry((g.username.clone(), g.access_item.clone(), g.mode)).or_insert(g);
                }
                GrantEvent::Revoked { username, access_item, mode, .. } => {
                    grants.remove(&(username, access_item, mode));
                }
            }
        }
        Ok(Self { grants: RwLock::new(grants), journal: Mutex::new(journal) })
    }

    /// Idempotent: re-granting returns the stored grant unchanged.
    pub fn grant(&self, username: &str, item: AccessItem, mode: AccessMode, by: &str, now: u64) -> Result<Grant, AccessError> {
        let key = (username.to_string(), item.clone(), mode);
        let mut journal = self.journal.lock();
        if let Some(existing) = self.grants.read().get(&key) {
            return Ok(existing.clone());
        }
        let grant = Grant {
            username: username.to_string(),
            access_item: item,
            mode,
            granted_by: by.to_string(),
            granted_at: now,
        };
        journal
            .append_flush(&GrantEvent::Granted(grant.clone()))
            .map_err(|e| AccessError::Storage(e.to_string()))?;
        self.grants.write().insert(key, grant.clone());
        Ok(grant)
    }

    pub fn revoke(&self, username: &str, item: AccessItem, mode: AccessMode, by: &str, now: u64) -> Result<(), AccessError> {
        let key = (username.to_string(), item.clone(), mode);
        let mut journal = self.journal.lock();
        if !self.grants.read().contains_key(&key) {
            return Ok(());
        }
        journal
            .append_flush(&GrantEvent::Revoked {
                username: username.to_string(),
                access_item: item,
                mode,
                revoked_by: by.to_string(),
                at: now,
            })
            .map_err(|e| AccessError::Storage(e.to_string()))?;
        self.grants.write().remove(&key);
        Ok(())
    }

    /// Allow iff the user holds `mode` on the item itself or on its home.
    pub fn check(&self, username: &str, item: &AccessItem, mode: AccessMode) -> Decision {
        let grants = self.grants.read();
        let user = username.to_string();
        let covered = grants.contains_key(&(user.clone(), item.clone(), mode))
            || (!item.is_home() && grants.contains_key(&(user, item.enclosing_home(), mode)));
        if covered {
            Decision::Allow
        } else {
            Decision::Deny
        }
    }

    /// All grants of `username`, ordered by (access item, mode).
    pub fn list(&self, username: &str) -> Vec<Grant> {
        self.grants
            .read()
            .iter()
            .filter(|((u, _, _), _)| u == username)
            .map(|(_, g)| g.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditRecord {
    pub at: u64,
    /// Subject of the token that made the request.
    pub subject: String,
    pub action: String,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<AccessMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
}

/// Recent audit records in memory plus a JSON-lines file flushed in the
/// background.
pub struct AuditLog {
    ring: Mutex<VecDeque<AuditRecord>>,
    file: Option<Mutex<BufWriter<std::fs::File>>>,
}

impl AuditLog {
    pub fn open(path: Option<PathBuf>) -> std::io::Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                Some(Mutex::new(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?)))
            }
            None => None,
        };
        Ok(Self { ring: Mutex::new(VecDeque::with_capacity(1024)), file })
    }

    pub fn record(&self, record: AuditRecord) {
        if let Some(file) = &self.file {
            let mut w = file.lock();
            if serde_json::to_writer(&mut *w, &record).is_ok() {
                let _ = w.write_all(b"\n");
            }
        }
        let mut ring = self.ring.lock();
        if ring.len() == AUDIT_RING {
            ring.pop_front();
        }
        ring.push_back(record);
    }

    pub fn flush(&self) {
        if let Some(file) = &self.file {
            let _ = file.lock().flush();
        }
    }

    /// Newest first, optionally restricted to one requesting subject.
    pub fn recent(&self, subject: Option<&str>, limit: usize) -> Vec<AuditRecord> {
        self.ring
            .lock()
            .iter()
            .rev()
            .filter(|r| subject.is_none_or(|s| r.subject == s))
            .take(limit)
            .cloned()
            .collect()
    }
}

/// Where grant targets are checked for existence.
#[derive(Clone)]
pub enum UserDirectory {
    Security(Arc<Upstream>),
    Fixed(Arc<HashSet<String>>),
}

impl UserDirectory {
    async fn exists(&self, token: &str, username: &str) -> Result<bool, AccessError> {
        match self {
            UserDirectory::Fixed(set) => Ok(set.contains(username)),
            UserDirectory::Security(upstream) => {
                let path = format!("/users/{username}");
                let resp = upstream
                    .send_buffered(|client, base| client.get(format!("{base}{path}")).bearer_auth(token))
                    .await?;
                match resp.status {
                    s if s.is_success() => Ok(true),
                    StatusCode::NOT_FOUND => Ok(false),
                    StatusCode::FORBIDDEN | StatusCode::UNAUTHORIZED => Err(AccessError::Forbidden),
                    s => Err(AccessError::Upstream(UpstreamError::Connect(
                        upstream.target().to_string(),
                        format!("unexpected status {s}"),
                    ))),
                }
            }
        }
    }
}

#[derive(Clone)]
pub struct AccessState {
    pub grants: Arc<GrantStore>,
    pub audit: Arc<AuditLog>,
    pub users: UserDirectory,
    pub auth: Auth,
}

impl FromRef<AccessState> for Auth {
    fn from_ref(s: &AccessState) -> Auth {
        s.auth.clone()
    }
}

impl AccessState {
    fn audit(&self, caller: &Principal, action: &str, user: &str, item: Option<&AccessItem>, mode: Option<AccessMode>, decision: Option<Decision>) {
        self.audit.record(AuditRecord {
            at: self.auth.clock.now_ms(),
            subject: caller.subject.clone(),
            action: action.to_string(),
            user: user.to_string(),
            item: item.map(|i| i.to_string()),
            mode,
            decision,
        });
    }

    pub async fn grant(&self, caller: &Authenticated, username: &str, item: AccessItem, mode: AccessMode) -> Result<Grant, AccessError> {
        if !caller.principal.is_admin() {
            return Err(AccessError::Forbidden);
        }
        if !self.users.exists(&caller.token, username).await? {
            return Err(AccessError::UnknownUser(username.to_string()));
        }
        let grant = self.grants.grant(username, item.clone(), mode, &caller.principal.subject, self.auth.clock.now_ms())?;
        self.audit(&caller.principal, "grant", username, Some(&item), Some(mode), None);
        Ok(grant)
    }

    pub fn revoke(&self, caller: &Principal, username: &str, item: AccessItem, mode: AccessMode) -> Result<(), AccessError> {
        if !caller.is_admin() {
            return Err(AccessError::Forbidden);
        }
        self.grants.revoke(username, item.clone(), mode, &caller.subject, self.auth.clock.now_ms())?;
        self.audit(caller, "revoke", username, Some(&item), Some(mode), None);
        Ok(())
    }

    /// Services ask on behalf of the relayed caller, so a non-admin may only
    /// ask about itself.
    pub fn check(&self, caller: &Principal, username: &str, item: &AccessItem, mode: AccessMode) -> Result<Decision, AccessError> {
        if !caller.is_admin() && caller.subject != username {
            return Err(AccessError::Forbidden);
        }
        let decision = self.grants.check(username, item, mode);
        self.audit(caller, "check", username, Some(item), Some(mode), Some(decision));
        Ok(decision)
    }

    pub fn list(&self, caller: &Principal, username: &str) -> Result<Vec<Grant>, AccessError> {
        if !caller.is_admin() && caller.subject != username {
            return Err(AccessError::Forbidden);
        }
        self.audit(caller, "list-grants", username, None, None, None);
        Ok(self.grants.list(username))
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct GrantBody {
    username: String,
    access_item: String,
    mode: String,
}

impl GrantBody {
    fn parse(self) -> Result<(String, AccessItem, AccessMode), ApiError> {
        let item = AccessItem::parse(&self.access_item).map_err(|e| AccessError::MalformedItem(e.to_string()))?;
        let mode = self
            .mode
            .parse::<AccessMode>()
            .map_err(|e| ApiError::bad_request("malformed-mode", e.to_string()))?;
        Ok((self.username, item, mode))
    }
}

#[derive(Deserialize)]
struct CheckQuery {
    user: String,
    item: String,
    mode: String,
}

#[derive(Deserialize)]
struct AuditQuery {
    subject: Option<String>,
    limit: Option<usize>,
}

async fn post_grant(State(s): State<AccessState>, caller: Authenticated, body: Result<Json<GrantBody>, JsonRejection>) -> Result<Json<Grant>, ApiError> {
    let Json(b) = body.map_err(json_rejection)?;
    let (user, item, mode) = b.parse()?;
    Ok(Json(s.grant(&caller, &user, item, mode).await?))
}

async fn delete_grant(State(s): State<AccessState>, caller: Authenticated, body: Result<Json<GrantBody>, JsonRejection>) -> Result<StatusCode, ApiError> {
    let Json(b) = body.map_err(json_rejection)?;
    let (user, item, mode) = b.parse()?;
    s.revoke(&caller.principal, &user, item, mode)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_check(State(s): State<AccessState>, caller: Authenticated, q: Result<Query<CheckQuery>, QueryRejection>) -> Result<Json<serde_json::Value>, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::bad_request("malformed-request", e.body_text()))?;
    let item = AccessItem::parse(&q.item).map_err(|e| AccessError::MalformedItem(e.to_string()))?;
    let mode = q.mode.parse::<AccessMode>().map_err(|e| ApiError::bad_request("malformed-mode", e.to_string()))?;
    let decision = s.check(&caller.principal, &q.user, &item, mode)?;
    Ok(Json(serde_json::json!({ "user": q.user, "item": item, "mode": mode, "decision": decision })))
}

async fn get_grants(State(s): State<AccessState>, caller: Authenticated, Path(user): Path<String>) -> Result<Json<Vec<Grant>>, ApiError> {
    Ok(Json(s.list(&caller.principal, &user)?))
}

async fn get_audit(State(s): State<AccessState>, caller: Authenticated, Query(q): Query<AuditQuery>) -> Result<Json<Vec<AuditRecord>>, ApiError> {
    if !caller.principal.is_admin() {
        return Err(ApiError::forbidden());
    }
    Ok(Json(s.audit.recent(q.subject.as_deref(), q.limit.unwrap_or(100).min(AUDIT_RING))))
}

pub fn router(state: AccessState) -> Router {
    Router::new()
        .route("/access/grants", post(post_grant).delete(delete_grant))
        .route("/access/grants/{user}", get(get_grants))
        .route("/access/check", get(get_check))
        .route("/access/audit", get(get_audit))
        .with_state(state)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct AccessConfig {
    #[serde(flatten)]
    pub service: ServiceConfig,
    /// Defaults to `<dataDir>/grants.jsonl`.
    pub journal: Option<PathBuf>,
    /// Defaults to `<dataDir>/audit.jsonl`.
    pub audit_file: Option<PathBuf>,
}

impl Default for AccessConfig {
    fn default() -> Self {
        Self { service: ServiceConfig::with_port(7002), journal: None, audit_file: None }
    }
}

pub async fn start(config: AccessConfig, clock: SharedClock) -> std::io::Result<RunningService> {
    let data = &config.service.data_dir;
    let grants = GrantStore::open(config.journal.clone().unwrap_or_else(|| data.join("grants.jsonl")))?;
    let audit = Arc::new(AuditLog::open(Some(config.audit_file.clone().unwrap_or_else(|| data.join("audit.jsonl"))))?);
    let cluster = Cluster::new(SERVICE_NAME, &config.service, clock.clone());
    let state = AccessState {
        grants: Arc::new(grants),
        audit: audit.clone(),
        users: UserDirectory::Security(cluster.upstream(crate::security::SERVICE_NAME)),
        auth: Auth::new(&config.service.token_secret, clock),
    };
    let listener = tokio::net::TcpListener::bind(config.service.bind).await?;
    let addr = listener.local_addr()?;
    let instance_id = config.service.instance_id(SERVICE_NAME, addr);
    let pause = PauseSwitch::default();
    let server = serve(listener, finish_router(router(state), &instance_id, pause.clone()));
    let lease = cluster.lease(&config.service, addr, &instance_id);
    let flusher = tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_millis(500));
        loop {
            tick.tick().await;
            audit.flush();
        }
    });
    tracing::info!(%addr, "access control listening");
    Ok(RunningService::new(SERVICE_NAME, instance_id, addr, pause, vec![server, lease, flusher]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(s: &str) -> AccessItem {
        AccessItem::parse(s).unwrap()
    }

    fn store() -> (tempfile::TempDir, GrantStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = GrantStore::open(dir.path().join("g.jsonl")).unwrap();
        (dir, s)
    }

    #[test]
    fn home_grant_covers_items_and_modes_are_independent() {
        let (_d, s) = store();
        s.grant("mia", item("home/h1"), AccessMode::Write, "admin", 1).unwrap();
        assert_eq!(s.check("mia", &item("home/h1/item/lamp"), AccessMode::Write), Decision::Allow);
        assert_eq!(s.check("mia", &item("home/h1/item/lamp"), AccessMode::Read), Decision::Deny);
        assert_eq!(s.check("mia", &item("home/h2/item/lamp"), AccessMode::Write), Decision::Deny);
        assert_eq!(s.check("bob", &item("home/h1"), AccessMode::Write), Decision::Deny);
    }

    #[test]
    fn item_grant_does_not_cover_home() {
        let (_d, s) = store();
        s.grant("mia", item("home/h1/item/lamp"), AccessMode::Read, "admin", 1).unwrap();
        assert_eq!(s.check("mia", &item("home/h1"), AccessMode::Read), Decision::Deny);
        assert_eq!(s.check("mia", &item("home/h1/item/lamp"), AccessMode::Read), Decision::Allow);
    }

    #[test]
    fn grant_is_idempotent_and_revoke_restores() {
        let (_d, s) = store();
        let a = s.grant("mia", item("home/h1"), AccessMode::Read, "admin", 1).unwrap();
        let b = s.grant("mia", item("home/h1"), AccessMode::Read, "root", 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.list("mia").len(), 1);
        s.revoke("mia", item("home/h1"), AccessMode::Read, "admin", 3).unwrap();
        s.revoke("mia", item("home/h1"), AccessMode::Read, "admin", 3).unwrap();
        assert_eq!(s.check("mia", &item("home/h1"), AccessMode::Read), Decision::Deny);
        assert!(s.list("mia").is_empty());
    }

    #[test]
    fn journal_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        {
            let s = GrantStore::open(&path).unwrap();
            s.grant("mia", item("home/h1"), AccessMode::Read, "admin", 1).unwrap();
            s.grant("mia", item("home/h2"), AccessMode::Write, "admin", 2).unwrap();
            s.revoke("mia", item("home/h1"), AccessMode::Read, "admin", 3).unwrap();
        }
        let s = GrantStore::open(&path).unwrap();
        let grants = s.list("mia");
        assert_eq!(grants.len(), 1);
        assert_eq!(grants[0].access_item, item("home/h2"));
    }

    #[test]
    fn list_is_sorted_by_item_then_mode() {
        let (_d, s) = store();
        s.grant("u", item("home/b"), AccessMode::Write, "a", 0).unwrap();
        s.grant("u", item("home/a/item/x"), AccessMode::Write, "a", 0).unwrap();
        s.grant("u", item("home/a/item/x"), AccessMode::Read, "a", 0).unwrap();
        s.grant("v", item("home/a"), AccessMode::Read, "a", 0).unwrap();
        let got: Vec<(String, AccessMode)> = s.list("u").into_iter().map(|g| (g.access_item.to_string(), g.mode)).collect();
        assert_eq!(
            got,
            vec![
                ("home/a/item/x".into(), AccessMode::Read),
                ("home/a/item/x".into(), AccessMode::Write),
                ("home/b".into(), AccessMode::Write),
            ]
        );
    }

    #[test]
    fn audit_ring_filters_and_orders_newest_first() {
        let log = AuditLog::open(None).unwrap();
        for (i, who) in ["a", "b", "a"].iter().enumerate() {
            log.record(AuditRecord {
                at: i as u64,
                subject: who.to_string(),
                action: "check".into(),
                user: who.to_string(),
                item: None,
                mode: None,
                decision: None,
            });
        }
        let a: Vec<u64> = log.recent(Some("a"), 10).iter().map(|r| r.at).collect();
        assert_eq!(a, vec![2, 0]);
        assert_eq!(log.recent(None, 1)[0].at, 2);
    }
}
