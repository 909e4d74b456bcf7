//! API gateway: the single external entry point. Authenticates, then relays
//! requests (and the caller's token) to services found via discovery.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{FromRef, Request, State};
use axum::http::header::{self, HeaderMap, HeaderName, AUTHORIZATION};
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use http_body_util::{BodyExt, LengthLimitError, Limited};
use rca_core::SharedClock;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::http::{finish_router, serve, ApiError, Auth, Authenticated, PauseSwitch};
use crate::upstream::{Upstream, UpstreamError};
use crate::{Cluster, RunningService, ServiceConfig};

pub const SERVICE_NAME: &str = "gateway";
pub const TOKEN_PATH: &str = "/api/auth/token";
pub const DEFAULT_BODY_LIMIT: usize = 1024 * 1024;

/// Maps an external path prefix to a service and the prefix it expects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Route {
    pub prefix: String,
    pub service: String,
    pub upstream_prefix: String,
}

impl Route {
    fn new(prefix: &str, service: &str, upstream_prefix: &str) -> Self {
        Self { prefix: prefix.into(), service: service.into(), upstream_prefix: upstream_prefix.into() }
    }

    /// The upstream path for `path`, if this route owns it.
    fn rewrite(&self, path: &str) -> Option<String> {
        let rest = path.strip_prefix(&self.prefix)?;
        if !rest.is_empty() && !rest.starts_with('/') {
            return None;
        }
        let rewritten = format!("{}{rest}", self.upstream_prefix);
        Some(if rewritten.is_empty() { "/".into() } else { rewritten })
    }
}

pub fn default_routes() -> Vec<Route> {
    vec![
        Route::new("/api/history", crate::history::SERVICE_NAME, ""),
        Route::new("/api/control", crate::control::SERVICE_NAME, "/control"),
        Route::new("/api/access", crate::access::SERVICE_NAME, "/access"),
        Route::new("/api/auth", crate::security::SERVICE_NAME, "/auth"),
        Route::new("/api/users", crate::security::SERVICE_NAME, "/users"),
    ]
}

/// Finds the route with the longest matching prefix.
pub fn resolve_route<'a>(routes: &'a [Route], path: &str) -> Option<(&'a Route, String)> {
    routes
        .iter()
        .filter_map(|r| r.rewrite(path).map(|p| (r, p)))
        .max_by_key(|(r, _)| r.prefix.len())
}

/// The one route reachable without a token.
pub fn is_anonymous(method: &Method, path: &str) -> bool {
    method == Method::POST && path == TOKEN_PATH
}

const HOP_BY_HOP: [&str; 8] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

fn forwardable(name: &HeaderName, connection_listed: &[String]) -> bool {
    let n = name.as_str();
    !HOP_BY_HOP.contains(&n) && n != "host" && n != "content-length" && !connection_listed.iter().any(|c| c == n)
}

fn connection_tokens(headers: &HeaderMap) -> Vec<String> {
    headers
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .map(|t| t.trim().to_ascii_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn copy_headers(from: &HeaderMap, to: &mut HeaderMap) {
    let listed = connection_tokens(from);
    for (name, value) in from {
        if forwardable(name, &listed) {
            to.append(name.clone(), value.clone());
        }
    }
}

#[derive(Clone)]
pub struct GatewayState {
    routes: Arc<Vec<Route>>,
    upstreams: Arc<HashMap<String, Arc<Upstream>>>,
    cluster: Arc<Cluster>,
    auth: Auth,
    body_limit: usize,
}

impl FromRef<GatewayState> for Auth {
    fn from_ref(s: &GatewayState) -> Auth {
        s.auth.clone()
    }
}

impl GatewayState {
    pub fn new(routes: Vec<Route>, cluster: Cluster, auth: Auth, body_limit: usize) -> Self {
        let upstreams = routes
            .iter()
            .map(|r| (r.service.clone(), cluster.upstream(&r.service)))
            .collect();
        Self {
            routes: Arc::new(routes),
            upstreams: Arc::new(upstreams),
            cluster: Arc::new(cluster),
            auth,
            body_limit,
        }
    }

    pub fn upstream(&self, service: &str) -> Option<&Arc<Upstream>> {
        self.upstreams.get(service)
    }
}

fn gateway_error(e: UpstreamError) -> ApiError {
    match e {
        UpstreamError::BreakerOpen(_) | UpstreamError::NoInstances(_) => e.to_api_error(),
        UpstreamError::Timeout(_) => ApiError::new(StatusCode::BAD_GATEWAY, "upstream-timeout", e.to_string()),
        UpstreamError::Connect(..) => ApiError::new(StatusCode::BAD_GATEWAY, "bad-gateway", e.to_string()),
    }
}

async fn proxy(State(s): State<GatewayState>, request: Request) -> Result<Response, ApiError> {
    let (parts, body) = request.into_parts();
    let path = parts.uri.path().to_string();
    let Some((route, upstream_path)) = resolve_route(&s.routes, &path) else {
        return Err(ApiError::not_found("no-route", format!("no route for {path}")));
    };
    if !is_anonymous(&parts.method, &path) {
        s.auth.authenticate(parts.headers.get(AUTHORIZATION))?;
    }
    let too_large = || ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload-too-large", "request body exceeds limit");
    let declared = parts
        .headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    if declared.is_some_and(|n| n > s.body_limit as u64) {
        return Err(too_large());
    }
    let body = match Limited::new(body, s.body_limit).collect().await {
        Ok(collected) => collected.to_bytes(),
        Err(e) if e.downcast_ref::<LengthLimitError>().is_some() => return Err(too_large()),
        Err(e) => return Err(ApiError::bad_request("malformed-request", e.to_string())),
    };
    let upstream = s
        .upstreams
        .get(&route.service)
        .ok_or_else(|| ApiError::internal(format!("route target {} not configured", route.service)))?;
    let query = parts.uri.query().map(|q| format!("?{q}")).unwrap_or_default();
    let mut headers = HeaderMap::new();
    copy_headers(&parts.headers, &mut headers);
    let method = parts.method.clone();
    let response = upstream
        .send(|client, base| {
            client
                .request(method, format!("{base}{upstream_path}{query}"))
                .headers(headers)
                .body(body)
        })
        .await
        .map_err(gateway_error)?;

    let mut out = Response::builder().status(response.status().as_u16());
    if let Some(h) = out.headers_mut() {
        copy_headers(response.headers(), h);
    }
    out.body(Body::from_stream(response.bytes_stream()))
        .map_err(|e| ApiError::internal(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "camelCase")]
pub struct StatusInstance {
    pub instance_id: String,
    pub base_url: String,
    pub lease_expiry: u64,
}

/// Registry view for operators: every routed service plus the gateway, with
/// its live instances (possibly none).
async fn status(State(s): State<GatewayState>, _caller: Authenticated) -> Result<Json<serde_json::Value>, ApiError> {
    let all = s
        .cluster
        .discovery
        .all()
        .await
        .map_err(|e| ApiError::unavailable("discovery-unavailable", e.to_string()))?;
    let mut services: BTreeMap<String, Vec<StatusInstance>> = BTreeMap::new();
    services.insert(SERVICE_NAME.into(), Vec::new());
    for r in s.routes.iter() {
        services.entry(r.service.clone()).or_default();
    }
    if let Some(map) = all.as_object() {
        for (name, list) in map {
            let instances: Vec<StatusInstance> = serde_json::from_value(list.clone()).unwrap_or_default();
            services.insert(name.clone(), instances);
        }
    }
    let breakers: BTreeMap<&str, &str> = s
        .upstreams
        .iter()
        .map(|(name, u)| (name.as_str(), u.breaker_state().name()))
        .collect();
    Ok(Json(serde_json::json!({ "services": services, "breakers": breakers })))
}

async fn not_found() -> impl IntoResponse {
    ApiError::not_found("no-route", "no such route")
}

pub fn router(state: GatewayState, ui_dir: Option<PathBuf>) -> Router {
    let mut router = Router::new()
        .route("/api/status", get(status))
        .route("/api", axum::routing::any(not_found))
        .route("/api/{*rest}", axum::routing::any(proxy))
        .with_state(state);
    if let Some(dir) = ui_dir {
        router = router.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    router
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GatewayConfig {
    #[serde(flatten)]
    pub service: ServiceConfig,
    pub routes: Vec<Route>,
    pub max_body_bytes: usize,
    pub ui_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            service: ServiceConfig::with_port(8080),
            routes: default_routes(),
            max_body_bytes: DEFAULT_BODY_LIMIT,
            ui_dir: Some(PathBuf::from("ui")),
        }
    }
}

pub async fn start(config: GatewayConfig, clock: SharedClock) -> std::io::Result<RunningService> {
    let cluster = Cluster::new(SERVICE_NAME, &config.service, clock.clone());
    let listener = tokio::net::TcpListener::bind(config.service.bind).await?;
    let addr = listener.local_addr()?;
    let instance_id = config.service.instance_id(SERVICE_NAME, addr);
    let lease = cluster.lease(&config.service, addr, &instance_id);
    let state = GatewayState::new(
        config.routes.clone(),
        cluster,
        Auth::new(&config.service.token_secret, clock),
        config.max_body_bytes,
    );
    let pause = PauseSwitch::default();
    let server = serve(listener, finish_router(router(state, config.ui_dir.clone()), &instance_id, pause.clone()));
    tracing::info!(%addr, "gateway listening");
    Ok(RunningService::new(SERVICE_NAME, instance_id, addr, pause, vec![server, lease]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_rewrites() {
        let routes = default_routes();
        let r = |p: &str| resolve_route(&routes, p).map(|(r, up)| (r.service.clone(), up));
        assert_eq!(r("/api/history/homes"), Some(("history".into(), "/homes".into())));
        assert_eq!(r("/api/history"), Some(("history".into(), "/".into())));
        assert_eq!(r("/api/control/homes/h1/commands"), Some(("remotecontrol".into(), "/control/homes/h1/commands".into())));
        assert_eq!(r("/api/access/check"), Some(("accesscontrol".into(), "/access/check".into())));
        assert_eq!(r("/api/auth/token"), Some(("security".into(), "/auth/token".into())));
        assert_eq!(r("/api/users/mia/password"), Some(("security".into(), "/users/mia/password".into())));
        assert_eq!(r("/api/historyx"), None);
        assert_eq!(r("/api/nope"), None);
    }

    #[test]
    fn only_token_issue_is_anonymous() {
        assert!(is_anonymous(&Method::POST, TOKEN_PATH));
        assert!(!is_anonymous(&Method::GET, TOKEN_PATH));
        assert!(!is_anonymous(&Method::POST, "/api/auth/validate"));
    }

    #[test]
    fn hop_by_hop_headers_are_dropped() {
        let mut from = HeaderMap::new();
        from.insert("connection", "keep-alive, x-secret-hop".parse().unwrap());
        from.insert("x-secret-hop", "1".parse().unwrap());
        from.insert("transfer-encoding", "chunked".parse().unwrap());
        from.insert("authorization", "Bearer t".parse().unwrap());
        from.insert("content-type", "application/json".parse().unwrap());
        let mut to = HeaderMap::new();
        copy_headers(&from, &mut to);
        let mut names: Vec<&str> = to.keys().map(|k| k.as_str()).collect();
        names.sort();
        assert_eq!(names, vec!["authorization", "content-type"]);
    }
}
