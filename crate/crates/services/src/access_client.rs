//! Access decisions as seen from other services.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use parking_lot::Mutex;
use rca_core::{AccessItem, AccessMode};
use tokio::time::Instant;

use crate::access::{Decision, Grant, GrantStore};
use crate::http::{ApiError, Authenticated};
use crate::upstream::{Buffered, Upstream};

type CacheKey = (String, AccessItem, AccessMode);

/// Remote checks with a short per-(user, item, mode) decision cache.
pub struct RemoteAccess {
    upstream: Arc<Upstream>,
    ttl: Duration,
    cache: Mutex<HashMap<CacheKey, (Instant, Decision)>>,
}

impl RemoteAccess {
    pub fn new(upstream: Arc<Upstream>, ttl: Duration) -> Self {
        Self { upstream, ttl, cache: Mutex::new(HashMap::new()) }
    }

    pub fn upstream(&self) -> &Arc<Upstream> {
        &self.upstream
    }

    fn cached(&self, key: &CacheKey) -> Option<Decision> {
        let mut cache = self.cache.lock();
        match cache.get(key) {
            Some((at, d)) if at.elapsed() < self.ttl => Some(*d),
            Some(_) => {
                cache.remove(key);
                None
            }
            None => None,
        }
    }
}

fn relay_status(resp: &Buffered) -> ApiError {
    let message = resp
        .json::<serde_json::Value>()
        .and_then(|v| v.get("message").and_then(|m| m.as_str()).map(str::to_string))
        .unwrap_or_else(|| format!("access control answered {}", resp.status));
    match resp.status {
        StatusCode::UNAUTHORIZED => ApiError::unauthorized(message),
        StatusCode::FORBIDDEN => ApiError::forbidden(),
        s if s.is_server_error() => ApiError::unavailable("upstream-error", message),
        _ => ApiError::internal(message),
    }
}

#[derive(Clone)]
pub enum AccessSource {
    Remote(Arc<RemoteAccess>),
    /// In-process grant store, used by tests and single-process setups.
    Local(Arc<GrantStore>),
}

impl AccessSource {
    pub async fn check(&self, caller: &Authenticated, item: &AccessItem, mode: AccessMode) -> Result<bool, ApiError> {
        let user = &caller.principal.subject;
        match self {
            AccessSource::Local(store) => Ok(store.check(user, item, mode) == Decision::Allow),
            AccessSource::Remote(remote) => {
                let key = (user.clone(), item.clone(), mode);
                if let Some(d) = remote.cached(&key) {
                    return Ok(d == Decision::Allow);
                }
                let query = [("user", user.as_str()), ("item", item.as_str()), ("mode", mode.as_str())];
                let resp = remote
                    .upstream
                    .send_buffered(|client, base| {
                        client.get(format!("{base}/access/check")).query(&query).bearer_auth(&caller.token)
                    })
                    .await?;
                if resp.status != StatusCode::OK {
                    return Err(relay_status(&resp));
                }
                let decision = resp
                    .json::<serde_json::Value>()
                    .and_then(|v| serde_json::from_value::<Decision>(v.get("decision")?.clone()).ok())
                    .ok_or_else(|| ApiError::internal("malformed access decision"))?;
                remote.cache.lock().insert(key, (Instant::now(), decision));
                Ok(decision == Decision::Allow)
            }
        }
    }

    /// The caller's own grants.
    pub async fn grants(&self, caller: &Authenticated) -> Result<Vec<Grant>, ApiError> {
        let user = &caller.principal.subject;
        match self {
            AccessSource::Local(store) => Ok(store.list(user)),
            AccessSource::Remote(remote) => {
                let resp = remote
                    .upstream
                    .send_buffered(|client, base| {
                        client.get(format!("{base}/access/grants/{user}")).bearer_auth(&caller.token)
                    })
                    .await?;
                if resp.status != StatusCode::OK {
                    return Err(relay_status(&resp));
                }
                resp.json().ok_or_else(|| ApiError::internal("malformed grant list"))
            }
        }
    }
}
