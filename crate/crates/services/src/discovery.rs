//! Lease-based service registry.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use indexmap::IndexMap;
use parking_lot::RwLock;
use rca_core::SharedClock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{finish_router, json_rejection, serve, ApiError, PauseSwitch};
use crate::RunningService;

pub const SERVICE_NAME_MAX: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ServiceRegistration {
    pub service_name: String,
    pub instance_id: String,
    pub base_url: String,
    pub lease_expiry: u64,
    pub registered_at: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegisterRequest {
    pub service_name: String,
    pub instance_id: String,
    pub base_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("malformed registration: {0}")]
    Malformed(&'static str),
    #[error("unknown instance")]
    UnknownInstance,
}

struct Entry {
    base_url: String,
    registered_at: u64,
    lease_expiry: AtomicU64,
}

/// Registry table. Heartbeats only take the read lock and bump an atomic
/// lease, so resolve never waits on them.
pub struct Registry {
    entries: RwLock<IndexMap<(String, String), Entry>>,
    ttl_ms: u64,
    clock: SharedClock,
}

fn valid_service_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= SERVICE_NAME_MAX
        && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

fn valid_instance_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b':'))
}

fn valid_base_url(url: &str) -> bool {
    reqwest::Url::parse(url)
        .map(|u| matches!(u.scheme(), "http" | "https") && u.host().is_some())
        .unwrap_or(false)
}

impl Registry {
    pub fn new(ttl_ms: u64, clock: SharedClock) -> Self {
        Self { entries: RwLock::new(IndexMap::new()), ttl_ms, clock }
    }

    fn snapshot(key: &(String, String), e: &Entry) -> ServiceRegistration {
        ServiceRegistration {
            service_name: key.0.clone(),
            instance_id: key.1.clone(),
            base_url: e.base_url.clone(),
            lease_expiry: e.lease_expiry.load(Ordering::Acquire),
            registered_at: e.registered_at,
        }
    }

    pub fn register(&self, req: RegisterRequest) -> Result<ServiceRegistration, RegistryError> {
        if !valid_service_name(&req.service_name) {
            return Err(RegistryError::Malformed("serviceName"));
        }
        if !valid_instance_id(&req.instance_id) {
            return Err(RegistryError::Malformed("instanceId"));
        }
        if !valid_base_url(&req.base_url) {
            return Err(RegistryError::Malformed("baseUrl"));
        }
        let now = self.clock.now_ms();
        let key = (req.service_name, req.instance_id);
        let entry = Entry {
            base_url: req.base_url,
            registered_at: now,
            lease_expiry: AtomicU64::new(now + self.ttl_ms),
        };
        let mut entries = self.entries.write();
        // An expired registration that has not been swept yet is a new one.
        if entries.get(&key).is_some_and(|e| e.lease_expiry.load(Ordering::Acquire) <= now) {
            entries.shift_remove(&key);
        }
        match entries.get_mut(&key) {
            Some(existing) => {
                existing.base_url = entry.base_url;
                existing.lease_expiry.store(now + self.ttl_ms, Ordering::Release);
            }
            None => {
                entries.insert(key.clone(), entry);
            }
        }
        let registration = Self::snapshot(&key, &entries[&key]);
        tracing::info!(service = %key.0, instance = %key.1, url = %registration.base_url, "registered");
        Ok(registration)
    }

    pub fn heartbeat(&self, service: &str, instance: &str) -> Result<u64, RegistryError> {
        let now = self.clock.now_ms();
        let entries = self.entries.read();
        let entry = entries
            .get(&(service.to_string(), instance.to_string()))
            .ok_or(RegistryError::UnknownInstance)?;
        let mut current = entry.lease_expiry.load(Ordering::Acquire);
        loop {
            if current <= now {
                return Err(RegistryError::UnknownInstance);
            }
            let renewed = (now + self.ttl_ms).max(current);
            match entry
                .lease_expiry
                .compare_exchange(current, renewed, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return Ok(renewed),
                Err(actual) => current = actual,
            }
        }
    }

    /// Live registrations for `service`, in registration order.
    pub fn resolve(&self, service: &str) -> Vec<ServiceRegistration> {
        let now = self.clock.now_ms();
        let mut stale = false;
        let live = {
            let entries = self.entries.read();
            entries
                .iter()
                .filter(|(k, _)| k.0 == service)
                .filter(|(_, e)| {
                    let alive = e.lease_expiry.load(Ordering::Acquire) > now;
                    stale |= !alive;
                    alive
                })
                .map(|(k, e)| Self::snapshot(k, e))
                .collect()
        };
        if stale {
            self.evict(now);
        }
        live
    }

    pub fn all(&self) -> BTreeMap<String, Vec<ServiceRegistration>> {
        let now = self.clock.now_ms();
        let mut out: BTreeMap<String, Vec<ServiceRegistration>> = BTreeMap::new();
        for (k, e) in self.entries.read().iter() {
            if e.lease_expiry.load(Ordering::Acquire) > now {
                out.entry(k.0.clone()).or_default().push(Self::snapshot(k, e));
            }
        }
        out
    }

    /// Removes every registration whose lease is at or before `now`.
    pub fn evict(&self, now: u64) -> Vec<(String, String)> {
        let mut evicted = Vec::new();
        self.entries.write().retain(|k, e| {
            let keep = e.lease_expiry.load(Ordering::Acquire) > now;
            if !keep {
                evicted.push(k.clone());
            }
            keep
        });
        for (service, instance) in &evicted {
            tracing::info!(%service, %instance, "lease expired, evicted");
        }
        evicted
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::Malformed(_) => ApiError::bad_request("malformed-registration", e.to_string()),
            RegistryError::UnknownInstance => ApiError::not_found("unknown-instance", e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct DiscoveryConfig {
    pub bind: SocketAddr,
    pub ttl_ms: u64,
    pub sweep_ms: u64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 7000)),
            ttl_ms: 30_000,
            sweep_ms: 5_000,
        }
    }
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route(
            "/registry/register",
            post(
                |State(r): State<Arc<Registry>>,
                 body: Result<Json<RegisterRequest>, axum::extract::rejection::JsonRejection>| async move {
                    let Json(req) = body.map_err(json_rejection)?;
                    Ok::<_, ApiError>(Json(r.register(req)?))
                },
            ),
        )
        .route(
            "/registry/heartbeat/{service}/{instance}",
            post(|State(r): State<Arc<Registry>>, Path((service, instance)): Path<(String, String)>| async move {
                let lease_expiry = r.heartbeat(&service, &instance)?;
                Ok::<_, ApiError>(Json(serde_json::json!({ "leaseExpiry": lease_expiry })))
            }),
        )
        .route(
            "/registry/services",
            get(|State(r): State<Arc<Registry>>| async move { Json(r.all()) }),
        )
        .route(
            "/registry/services/{service}",
            get(|State(r): State<Arc<Registry>>, Path(service): Path<String>| async move {
                (StatusCode::OK, Json(r.resolve(&service)))
            }),
        )
        .with_state(registry)
}

pub async fn start(config: DiscoveryConfig, clock: SharedClock) -> std::io::Result<RunningService> {
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    let addr = listener.local_addr()?;
    let registry = Arc::new(Registry::new(config.ttl_ms, clock.clone()));
    let pause = PauseSwitch::default();
    let instance_id = format!("discovery-{}", addr.port());
    let app = finish_router(router(registry.clone()), &instance_id, pause.clone());
    let server = serve(listener, app);
    let sweeper = {
        let registry = registry.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_millis(config.sweep_ms.max(1)));
            loop {
                tick.tick().await;
                registry.evict(clock.now_ms());
            }
        })
    };
    tracing::info!(%addr, "discovery listening");
    Ok(RunningService::new("discovery", instance_id, addr, pause, vec![server, sweeper]))
}

#[cfg(test)]
mod tests {
    use rca_core::{Clock, ManualClock};

    use super::*;

    fn req(name: &str, id: &str, url: &str) -> RegisterRequest {
        RegisterRequest { service_name: name.into(), instance_id: id.into(), base_url: url.into() }
    }

    fn registry() -> (ManualClock, Registry) {
        let clock = ManualClock::new(1_000);
        let r = Registry::new(30_000, clock.shared());
        (clock, r)
    }

    #[test]
    fn register_then_resolve() {
        let (_, r) = registry();
        r.register(req("history", "h-1", "http://127.0.0.1:7003")).unwrap();
        let found = r.resolve("history");
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].instance_id, "h-1");
        assert!(found[0].lease_expiry > found[0].registered_at);
        assert!(r.resolve("nosuch").is_empty());
    }

    #[test]
    fn re_register_replaces_url() {
        let (_, r) = registry();
        r.register(req("history", "h-1", "http://127.0.0.1:7003")).unwrap();
        r.register(req("history", "h-1", "http://127.0.0.1:8003")).unwrap();
        let found = r.resolve("history");
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].base_url, "http://127.0.0.1:8003");
    }

    #[test]
    fn malformed_registrations() {
        let (_, r) = registry();
        for bad in [
            req("", "x", "http://a:1"),
            req("History", "x", "http://a:1"),
            req("h", "", "http://a:1"),
            req("h", "x", "not a url"),
            req("h", "x", "ftp://a/"),
        ] {
            assert!(matches!(r.register(bad), Err(RegistryError::Malformed(_))));
        }
    }

    #[test]
    fn heartbeat_renews_and_detects_eviction() {
        let (clock, r) = registry();
        let first = r.register(req("a", "1", "http://h:1")).unwrap().lease_expiry;
        clock.advance(1_000);
        assert!(r.heartbeat("a", "1").unwrap() > first);
        assert_eq!(r.heartbeat("a", "nope"), Err(RegistryError::UnknownInstance));
        clock.advance(30_000);
        assert_eq!(r.evict(clock.now_ms()), vec![("a".to_string(), "1".to_string())]);
        assert_eq!(r.heartbeat("a", "1"), Err(RegistryError::UnknownInstance));
    }

    #[test]
    fn expired_instances_are_never_resolved() {
        let (clock, r) = registry();
        r.register(req("h", "1", "http://h:1")).unwrap();
        clock.advance(10_000);
        r.register(req("h", "2", "http://h:2")).unwrap();
        clock.advance(20_000);
        let live: Vec<_> = r.resolve("h").into_iter().map(|s| s.instance_id).collect();
        assert_eq!(live, vec!["2"]);
        // resolve evicted lazily; a second sweep at the same instant is empty.
        assert!(r.evict(clock.now_ms()).is_empty());
    }

    #[test]
    fn evict_all_and_idempotence() {
        let (clock, r) = registry();
        r.register(req("a", "1", "http://h:1")).unwrap();
        r.register(req("b", "1", "http://h:2")).unwrap();
        assert!(r.evict(clock.now_ms()).is_empty());
        clock.advance(30_000);
        assert_eq!(r.evict(clock.now_ms()).len(), 2);
        assert!(r.evict(clock.now_ms()).is_empty());
        assert!(r.all().is_empty());
    }

    #[test]
    fn resolve_keeps_registration_order() {
        let (_, r) = registry();
        for id in ["c", "a", "b"] {
            r.register(req("s", id, "http://h:1")).unwrap();
        }
        r.register(req("s", "a", "http://h:9")).unwrap();
        let ids: Vec<_> = r.resolve("s").into_iter().map(|s| s.instance_id).collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
    }
}
