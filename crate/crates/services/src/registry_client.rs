//! Client side of discovery: lease maintenance and cached resolution.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use reqwest::StatusCode;
use thiserror::Error;
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::discovery::{RegisterRequest, ServiceRegistration};

#[derive(Debug, Clone, Error)]
pub enum DiscoveryError {
    #[error("discovery unreachable: {0}")]
    Unreachable(String),
    #[error("unknown instance")]
    UnknownInstance,
    #[error("discovery rejected request: {0}")]
    Rejected(String),
}

struct Cached {
    fetched: Instant,
    instances: Arc<Vec<ServiceRegistration>>,
}

pub struct DiscoveryClient {
    base_url: String,
    http: reqwest::Client,
    cache_ttl: Duration,
    cache: Mutex<HashMap<String, Cached>>,
}

pub fn http_client(timeout: Duration) -> reqwest::Client {
    reqwest::Client::builder()
        .no_proxy()
        .connect_timeout(timeout)
        .timeout(timeout)
        .pool_idle_timeout(Duration::from_secs(30))
        .build()
        .expect("http client")
}

impl DiscoveryClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_cache_ttl(base_url, Duration::from_secs(1))
    }

    pub fn with_cache_ttl(base_url: impl Into<String>, cache_ttl: Duration) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            http: http_client(Duration::from_secs(2)),
            cache_ttl,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub async fn register(&self, req: &RegisterRequest) -> Result<ServiceRegistration, DiscoveryError> {
        let resp = self
            .http
            .post(format!("{}/registry/register", self.base_url))
            .json(req)
            .send()
            .await
            .map_err(|e| DiscoveryError::Unreachable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(DiscoveryError::Rejected(resp.text().await.unwrap_or_default()));
        }
        resp.json().await.map_err(|e| DiscoveryError::Unreachable(e.to_string()))
    }

    pub async fn heartbeat(&self, service: &str, instance: &str) -> Result<(), DiscoveryError> {
        let resp = self
            .http
            .post(format!("{}/registry/heartbeat/{service}/{instance}", self.base_url))
            .send()
            .await
            .map_err(|e| DiscoveryError::Unreachable(e.to_string()))?;
        match resp.status() {
            s if s.is_success() => Ok(()),
            StatusCode::NOT_FOUND => Err(DiscoveryError::UnknownInstance),
            s => Err(DiscoveryError::Rejected(s.to_string())),
        }
    }

    /// Live instances of `service`, cached briefly. When discovery is down a
    /// stale cached answer is preferred over failing.
    pub async fn resolve(&self, service: &str) -> Result<Arc<Vec<ServiceRegistration>>, DiscoveryError> {
        if let Some(hit) = self.cache.lock().get(service) {
            if hit.fetched.elapsed() < self.cache_ttl {
                return Ok(hit.instances.clone());
            }
        }
        match self.fetch(service).await {
            Ok(list) => {
                let instances = Arc::new(list);
                self.cache.lock().insert(
                    service.to_string(),
                    Cached { fetched: Instant::now(), instances: instances.clone() },
                );
                Ok(instances)
            }
            Err(e) => match self.cache.lock().get(service) {
                Some(stale) => Ok(stale.instances.clone()),
                None => Err(e),
            },
        }
    }

    async fn fetch(&self, service: &str) -> Result<Vec<ServiceRegistration>, DiscoveryError> {
        let resp = self
            .http
            .get(format!("{}/registry/services/{service}", self.base_url))
            .send()
            .await
            .map_err(|e| DiscoveryError::Unreachable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(DiscoveryError::Rejected(resp.status().to_string()));
        }
        resp.json().await.map_err(|e| DiscoveryError::Unreachable(e.to_string()))
    }

    pub async fn all(&self) -> Result<serde_json::Value, DiscoveryError> {
        let resp = self
            .http
            .get(format!("{}/registry/services", self.base_url))
            .send()
            .await
            .map_err(|e| DiscoveryError::Unreachable(e.to_string()))?;
        resp.json().await.map_err(|e| DiscoveryError::Unreachable(e.to_string()))
    }

    pub fn invalidate(&self, service: &str) {
        self.cache.lock().remove(service);
    }
}

/// Registers and then heartbeats forever, re-registering whenever the
/// registry has forgotten this instance (eviction or registry restart).
pub fn spawn_lease(client: Arc<DiscoveryClient>, req: RegisterRequest, heartbeat: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let retry = Duration::from_millis(500).min(heartbeat);
        let mut registered = false;
        loop {
            if !registered {
                match client.register(&req).await {
                    Ok(_) => registered = true,
                    Err(e) => {
                        tracing::debug!(service = %req.service_name, error = %e, "registration failed, retrying");
                        tokio::time::sleep(retry).await;
                        continue;
                    }
                }
            }
            tokio::time::sleep(heartbeat).await;
            match client.heartbeat(&req.service_name, &req.instance_id).await {
                Ok(()) => {}
                Err(DiscoveryError::UnknownInstance) => {
                    tracing::info!(service = %req.service_name, instance = %req.instance_id, "lease lost, re-registering");
                    registered = false;
                }
                Err(e) => tracing::debug!(error = %e, "heartbeat failed"),
            }
        }
    })
}
