//! Guarded calls to another service: discovery, round-robin choice and a
//! per-(caller, target) circuit breaker.

use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use bytes::Bytes;
use rca_core::resilience::{BreakerConfig, BreakerState, CircuitBreaker, Outcome, RoundRobin};
use rca_core::SharedClock;
use thiserror::Error;

use crate::http::ApiError;
use crate::registry_client::DiscoveryClient;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UpstreamError {
    #[error("circuit breaker open for {0}")]
    BreakerOpen(String),
    #[error("no live instances of {0}")]
    NoInstances(String),
    #[error("call to {0} timed out")]
    Timeout(String),
    #[error("connection to {0} failed: {1}")]
    Connect(String, String),
}

impl UpstreamError {
    /// Mapping used by services calling each other; the gateway maps
    /// connection failures to 502 itself.
    pub fn to_api_error(&self) -> ApiError {
        let code = match self {
            UpstreamError::BreakerOpen(_) => "breaker-open",
            UpstreamError::NoInstances(_) => "no-instances",
            UpstreamError::Timeout(_) => "upstream-timeout",
            UpstreamError::Connect(..) => "upstream-unavailable",
        };
        ApiError::unavailable(code, self.to_string())
    }
}

impl From<UpstreamError> for ApiError {
    fn from(e: UpstreamError) -> Self {
        e.to_api_error()
    }
}

#[derive(Debug, Clone)]
pub struct Buffered {
    pub status: StatusCode,
    pub body: Bytes,
}

impl Buffered {
    pub fn json<T: serde::de::DeserializeOwned>(&self) -> Option<T> {
        serde_json::from_slice(&self.body).ok()
    }
}

pub struct Upstream {
    target: String,
    discovery: Arc<DiscoveryClient>,
    balancer: Arc<RoundRobin>,
    breaker: CircuitBreaker,
    http: reqwest::Client,
    timeout: Duration,
}

impl Upstream {
    pub fn new(
        caller: &str,
        target: &str,
        discovery: Arc<DiscoveryClient>,
        balancer: Arc<RoundRobin>,
        config: BreakerConfig,
        clock: SharedClock,
    ) -> Self {
        let timeout = Duration::from_millis(config.call_timeout_ms);
        Self {
            target: target.to_string(),
            discovery,
            balancer,
            breaker: CircuitBreaker::new(format!("{caller}->{target}"), config, clock),
            // The breaker's timeout governs; the client bound is a backstop
            // that must not cut long-lived streams.
            http: reqwest::Client::builder()
                .no_proxy()
                .connect_timeout(timeout)
                .pool_idle_timeout(Duration::from_secs(30))
                .build()
                .expect("http client"),
            timeout,
        }
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn breaker_state(&self) -> BreakerState {
        self.breaker.state()
    }

    /// Sends one request and returns once response headers arrive. The body
    /// is left to the caller, so outcomes are recorded at header time.
    pub async fn send(
        &self,
        build: impl FnOnce(&reqwest::Client, &str) -> reqwest::RequestBuilder,
    ) -> Result<reqwest::Response, UpstreamError> {
        self.execute(build, |resp| async move { Ok(resp) }).await
    }

    /// Like [`send`](Self::send) but reads the whole body inside the call
    /// timeout.
    pub async fn send_buffered(
        &self,
        build: impl FnOnce(&reqwest::Client, &str) -> reqwest::RequestBuilder,
    ) -> Result<Buffered, UpstreamError> {
        self.execute(build, |resp| async move {
            let status = StatusCode::from_u16(resp.status().as_u16()).unwrap_or(StatusCode::BAD_GATEWAY);
            let body = resp.bytes().await?;
            Ok(Buffered { status, body })
        })
        .await
    }

    async fn execute<T, F, Fut>(
        &self,
        build: impl FnOnce(&reqwest::Client, &str) -> reqwest::RequestBuilder,
        finish: F,
    ) -> Result<T, UpstreamError>
    where
        F: FnOnce(reqwest::Response) -> Fut,
        Fut: std::future::Future<Output = Result<T, reqwest::Error>>,
        T: HasStatus,
    {
        let permit = self
            .breaker
            .try_acquire()
            .map_err(|_| UpstreamError::BreakerOpen(self.target.clone()))?;
        // Discovery trouble says nothing about the target's health, so the
        // permit is released without an outcome.
        let instances = match self.discovery.resolve(&self.target).await {
            Ok(list) => list,
            Err(_) => return Err(UpstreamError::NoInstances(self.target.clone())),
        };
        let Ok(instance) = self.balancer.choose(&self.target, &instances) else {
            return Err(UpstreamError::NoInstances(self.target.clone()));
        };
        let request = build(&self.http, &instance.base_url);
        let call = async {
            let resp = request.send().await?;
            finish(resp).await
        };
        match tokio::time::timeout(self.timeout, call).await {
            Err(_) => {
                permit.record(Outcome::Failure);
                Err(UpstreamError::Timeout(self.target.clone()))
            }
            Ok(Err(e)) => {
                permit.record(Outcome::Failure);
                if e.is_timeout() {
                    Err(UpstreamError::Timeout(self.target.clone()))
                } else {
                    Err(UpstreamError::Connect(self.target.clone(), e.to_string()))
                }
            }
            Ok(Ok(value)) => {
                let outcome = if value.status_code() >= 500 { Outcome::Failure } else { Outcome::Success };
                permit.record(outcome);
                Ok(value)
            }
        }
    }
}

pub trait HasStatus {
    fn status_code(&self) -> u16;
}

impl HasStatus for reqwest::Response {
    fn status_code(&self) -> u16 {
        self.status().as_u16()
    }
}

impl HasStatus for Buffered {
    fn status_code(&self) -> u16 {
        self.status.as_u16()
    }
}
