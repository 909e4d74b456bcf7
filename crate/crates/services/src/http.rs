//! Shared HTTP plumbing: serve loop, JSON errors, bearer authentication and
//! the pause switch used for fault injection.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{FromRef, FromRequestParts, Request, State};
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use axum::http::{HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use hyper_util::rt::{TokioExecutor, TokioIo};
use hyper_util::server::conn::auto;
use rca_core::token::bearer_token;
use rca_core::{Principal, SharedClock, TokenError, TokenSigner};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::{JoinHandle, JoinSet};
use tower::Service;

pub const INSTANCE_HEADER: &str = "x-rca-instance";

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn unauthorized(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", message)
    }

    pub fn forbidden() -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", "forbidden")
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn unavailable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

impl From<TokenError> for ApiError {
    fn from(e: TokenError) -> Self {
        let code = match e {
            TokenError::Expired => "expired-token",
            TokenError::Invalid => "invalid-token",
        };
        Self::new(StatusCode::UNAUTHORIZED, code, e.to_string())
    }
}

/// Token verification shared by every service; validation is local.
#[derive(Clone)]
pub struct Auth {
    pub signer: Arc<TokenSigner>,
    pub clock: SharedClock,
}

impl Auth {
    pub fn new(secret: &str, clock: SharedClock) -> Self {
        Self { signer: Arc::new(TokenSigner::new(secret)), clock }
    }

    pub fn authenticate(&self, header: Option<&HeaderValue>) -> Result<Authenticated, ApiError> {
        let header = header.ok_or_else(|| ApiError::unauthorized("missing bearer token"))?;
        let token = header
            .to_str()
            .ok()
            .and_then(bearer_token)
            .ok_or_else(|| ApiError::unauthorized("malformed authorization header"))?;
        let principal = self.signer.principal(token, self.clock.now_ms())?;
        Ok(Authenticated { principal, token: token.to_string() })
    }
}

/// Caller identity plus the raw token, kept for relaying to other services.
#[derive(Debug, Clone)]
pub struct Authenticated {
    pub principal: Principal,
    pub token: String,
}

impl<S> FromRequestParts<S> for Authenticated
where
    Auth: FromRef<S>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        Auth::from_ref(state).authenticate(parts.headers.get(AUTHORIZATION))
    }
}

/// Fault-injection switch: while paused, requests are accepted but never
/// answered.
#[derive(Clone)]
pub struct PauseSwitch {
    tx: Arc<watch::Sender<bool>>,
}

impl Default for PauseSwitch {
    fn default() -> Self {
        Self { tx: Arc::new(watch::channel(false).0) }
    }
}

impl PauseSwitch {
    pub fn set(&self, paused: bool) {
        self.tx.send_replace(paused);
    }

    pub fn is_paused(&self) -> bool {
        *self.tx.borrow()
    }

    pub async fn wait_resumed(&self) {
        let mut rx = self.tx.subscribe();
        let _ = rx.wait_for(|paused| !paused).await;
    }
}

async fn pause_gate(State(pause): State<PauseSwitch>, request: Request, next: Next) -> Response {
    pause.wait_resumed().await;
    next.run(request).await
}

/// Adds `/health`, the instance header and the pause gate to a service router.
pub fn finish_router(router: Router, instance_id: &str, pause: PauseSwitch) -> Router {
    let instance = HeaderValue::from_str(instance_id).unwrap_or_else(|_| HeaderValue::from_static("unknown"));
    router
        .route("/health", get(|| async { Json(json!({ "status": "up" })) }))
        .layer(middleware::map_response(move |mut response: Response| {
            let instance = instance.clone();
            async move {
                // A proxied response keeps the header of the instance that produced it.
                response.headers_mut().entry(INSTANCE_HEADER).or_insert(instance);
                response
            }
        }))
        .layer(middleware::from_fn_with_state(pause, pause_gate))
}

/// Serves `router` until the returned handle is aborted. Unlike
/// `axum::serve`, aborting also tears down every open connection, which is
/// what an in-process "kill" needs.
pub fn serve(listener: TcpListener, router: Router) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut connections = JoinSet::new();
        loop {
            tokio::select! {
                accepted = listener.accept() => {
                    let (stream, _peer) = match accepted {
                        Ok(conn) => conn,
                        Err(e) => {
                            tracing::warn!(error = %e, "accept failed");
                            tokio::time::sleep(std::time::Duration::from_millis(50)).await;
                            continue;
                        }
                    };
                    let _ = stream.set_nodelay(true);
                    let tower_service = router.clone();
                    connections.spawn(async move {
                        let service = hyper::service::service_fn(move |request: hyper::Request<hyper::body::Incoming>| {
                            let mut svc = tower_service.clone();
                            async move { Ok::<_, Infallible>(svc.call(request.map(axum::body::Body::new)).await.unwrap_or_else(|e| match e {})) }
                        });
                        let _ = auto::Builder::new(TokioExecutor::new())
                            .serve_connection_with_upgrades(TokioIo::new(stream), service)
                            .await;
                    });
                }
                Some(_) = connections.join_next(), if !connections.is_empty() => {}
            }
        }
    })
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

/// Parses a JSON body, mapping rejections to the common error shape.
pub fn json_rejection(e: axum::extract::rejection::JsonRejection) -> ApiError {
    ApiError::bad_request("malformed-request", e.body_text())
}
