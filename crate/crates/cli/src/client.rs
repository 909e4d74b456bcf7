//! Thin gateway client; every call maps to one gateway endpoint.

use std::time::Duration;

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

pub struct Gateway {
    base: String,
    http: reqwest::Client,
    token: Option<String>,
}

impl Gateway {
    pub fn new(base: &str, token: Option<String>) -> Result<Self, CliError> {
        let http = reqwest::Client::builder()
            .no_proxy()
            .connect_timeout(Duration::from_secs(3))
            .timeout(Duration::from_secs(15))
            .build()
            .map_err(|e| CliError::Connect(e.to_string()))?;
        Ok(Self { base: base.trim_end_matches('/').to_string(), http, token })
    }

    pub async fn call<B: Serialize, T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        query: &[(&str, String)],
        body: Option<&B>,
    ) -> Result<T, CliError> {
        let bytes = self.send(method, path, query, body).await?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Protocol(format!("unexpected response from {path}: {e}")))
    }

    /// Like [`Gateway::call`] for endpoints that answer with no body.
    pub async fn call_empty<B: Serialize>(&self, method: Method, path: &str, body: Option<&B>) -> Result<(), CliError> {
        self.send(method, path, &[], body).await.map(|_| ())
    }

    async fn send<B: Serialize>(
        &self,
        method: Method,
        path: &str,
        query: &[(&str, String)],
        body: Option<&B>,
    ) -> Result<bytes::Bytes, CliError> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if !query.is_empty() {
            req = req.query(query);
        }
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        if let Some(body) = body {
            req = req.json(body);
        }
        let resp = req.send().await.map_err(|e| CliError::Connect(connect_message(&self.base, &e)))?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| CliError::Connect(e.to_string()))?;
        if status.is_success() {
            return Ok(bytes);
        }
        let (code, message) = match serde_json::from_slice::<serde_json::Value>(&bytes) {
            Ok(v) => (
                v["error"].as_str().unwrap_or("error").to_string(),
                v["message"].as_str().unwrap_or("").to_string(),
            ),
            Err(_) => (status.canonical_reason().unwrap_or("error").to_ascii_lowercase(), String::new()),
        };
        Err(CliError::Http { status, code, message })
    }
}

fn connect_message(base: &str, e: &reqwest::Error) -> String {
    if e.is_timeout() {
        format!("gateway {base} timed out")
    } else {
        format!("cannot reach gateway {base}")
    }
}

/// Percent-encodes one path segment.
pub fn segment(s: &str) -> String {
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

pub fn is_unauthorized(e: &CliError) -> bool {
    matches!(e, CliError::Http { status, .. } if *status == StatusCode::UNAUTHORIZED)
}
