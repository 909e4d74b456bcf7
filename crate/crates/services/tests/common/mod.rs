#![allow(dead_code)]

use std::time::Duration;

use rca_broker::{BrokerConfig, RunningBroker};
use rca_core::clock::system_clock;
use rca_core::SharedClock;
use rca_services::{access, control, discovery, gateway, history, security, RunningService, ServiceConfig};
use serde_json::{json, Value};

pub const ADMIN_PASSWORD: &str = "stack-admin-pw";

pub struct Stack {
    pub dir: tempfile::TempDir,
    pub clock: SharedClock,
    pub broker: RunningBroker,
    pub discovery: RunningService,
    pub security: RunningService,
    pub access: Option<RunningService>,
    pub history: Vec<history::RunningHistory>,
    pub control: Option<RunningService>,
    pub gateway: RunningService,
    pub http: reqwest::Client,
}

pub struct Options {
    pub history_instances: usize,
    pub control: bool,
    pub max_body_bytes: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self { history_instances: 1, control: true, max_body_bytes: 1 << 20 }
    }
}

impl Stack {
    pub async fn start(opts: Options) -> Stack {
        let dir = tempfile::tempdir().unwrap();
        let clock = system_clock();
        let broker = rca_broker::start(
            BrokerConfig { bind: "127.0.0.1:0".parse().unwrap(), ..Default::default() },
            clock.clone(),
        )
        .await
        .unwrap();
        let discovery = discovery::start(
            discovery::DiscoveryConfig { bind: "127.0.0.1:0".parse().unwrap(), ..Default::default() },
            clock.clone(),
        )
        .await
        .unwrap();
        let base = ServiceConfig {
            discovery_url: discovery.base_url(),
            data_dir: dir.path().to_path_buf(),
            heartbeat_ms: 1_000,
            ..Default::default()
        };
        let security = security::start(
            security::SecurityConfig {
                service: base.clone(),
                admin_password: ADMIN_PASSWORD.into(),
                hash_iterations: 1_000,
                ..Default::default()
            },
            clock.clone(),
        )
        .await
        .unwrap();
        let access = access::start(access::AccessConfig { service: base.clone(), ..Default::default() }, clock.clone())
            .await
            .unwrap();
        let broker_addr = broker.local_addr().to_string();
        let mut histories = Vec::new();
        for _ in 0..opts.history_instances {
            histories.push(
                history::start(
                    history::HistoryConfig { service: base.clone(), broker: broker_addr.clone(), ..Default::default() },
                    clock.clone(),
                )
                .await
                .unwrap(),
            );
        }
        let control = if opts.control {
            Some(
                control::start(
                    control::ControlConfig { service: base.clone(), broker: broker_addr.clone(), ..Default::default() },
                    clock.clone(),
                )
                .await
                .unwrap(),
            )
        } else {
            None
        };
        let gateway = gateway::start(
            gateway::GatewayConfig {
                service: base.clone(),
                max_body_bytes: opts.max_body_bytes,
                ui_dir: Some(dir.path().join("ui")),
                ..Default::default()
            },
            clock.clone(),
        )
        .await
        .unwrap();
        let stack = Stack {
            dir,
            clock,
            broker,
            discovery,
            security,
            access: Some(access),
            history: histories,
            control,
            gateway,
            http: reqwest::Client::builder().no_proxy().timeout(Duration::from_secs(10)).build().unwrap(),
        };
        let mut want = vec![("security", 1), ("accesscontrol", 1), ("gateway", 1), ("history", opts.history_instances)];
        if opts.control {
            want.push(("remotecontrol", 1));
        }
        stack.wait_registered(&want).await;
        stack
    }

    pub async fn wait_registered(&self, want: &[(&str, usize)]) {
        for _ in 0..200 {
            let all: Value = self
                .http
                .get(format!("{}/registry/services", self.discovery.base_url()))
                .send()
                .await
                .unwrap()
                .json()
                .await
                .unwrap();
            let ok = want.iter().all(|(name, n)| all[name].as_array().map_or(0, |a| a.len()) == *n);
            if ok {
                return;
            }
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
        panic!("services did not register: {want:?}");
    }

    pub fn gw(&self, path: &str) -> String {
        format!("{}{path}", self.gateway.base_url())
    }

    pub async fn token(&self, user: &str, password: &str) -> String {
        let resp = self
            .http
            .post(self.gw("/api/auth/token"))
            .json(&json!({ "username": user, "password": password }))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 200, "login {user}");
        resp.json::<Value>().await.unwrap()["token"].as_str().unwrap().to_string()
    }

    pub async fn admin(&self) -> String {
        self.token("admin", ADMIN_PASSWORD).await
    }

    pub async fn add_user(&self, admin: &str, user: &str, role: &str) {
        let resp = self
            .http
            .post(self.gw("/api/users"))
            .bearer_auth(admin)
            .json(&json!({ "username": user, "password": password(user), "roles": [role] }))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 201, "create {user}");
    }

    pub async fn grant(&self, admin: &str, user: &str, item: &str, mode: &str) {
        let resp = self
            .http
            .post(self.gw("/api/access/grants"))
            .bearer_auth(admin)
            .json(&json!({ "username": user, "accessItem": item, "mode": mode }))
            .send()
            .await
            .unwrap();
        assert!(resp.status().is_success(), "grant {user} {item} {mode}: {}", resp.status());
    }

    /// Publishes telemetry through the broker and waits until every history
    /// instance has accepted it.
    pub async fn publish_states(&self, states: &[(&str, &str, &str, &str)]) {
        self.wait_consumers().await;
        let addr = self.broker.local_addr().to_string();
        let (client, _rx) = rca_broker::MqttClient::connect(&addr, rca_broker::ClientOptions::new("stack-feed"))
            .await
            .unwrap();
        for (ts, (home, item, kind, value)) in states.iter().enumerate() {
            let payload = json!({ "value": value, "timestamp": ts as u64 + 1, "kind": kind });
            client
                .publish(&rca_broker::state_topic(home, item), serde_json::to_vec(&payload).unwrap())
                .await
                .unwrap();
        }
        let seen = |h: &history::RunningHistory| {
            states.iter().enumerate().all(|(ts, (home, item, _, value))| {
                let ts = ts as u64 + 1;
                h.ingestor
                    .store
                    .history(home, item, ts, ts, usize::MAX)
                    .is_some_and(|v| v.iter().any(|s| s.value == *value))
            })
        };
        for _ in 0..400 {
            if self.history.iter().all(seen) {
                client.disconnect().await;
                return;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("history did not ingest telemetry");
    }

    /// Waits until every history instance is subscribed, by publishing a
    /// probe until each one has seen it.
    pub async fn wait_consumers(&self) {
        let addr = self.broker.local_addr().to_string();
        let (client, _rx) = rca_broker::MqttClient::connect(&addr, rca_broker::ClientOptions::new("stack-probe"))
            .await
            .unwrap();
        let start: Vec<u64> = self.history.iter().map(|h| h.ingestor.stats().received).collect();
        for _ in 0..400 {
            client.publish("rca/state/probe/ready", &b"{\"value\":\"1\",\"timestamp\":0}"[..]).await.unwrap();
            tokio::time::sleep(Duration::from_millis(10)).await;
            if self.history.iter().zip(&start).all(|(h, s)| h.ingestor.stats().received > *s) {
                client.disconnect().await;
                return;
            }
        }
        panic!("history consumers did not subscribe");
    }
}

pub fn password(user: &str) -> String {
    format!("{user}-password")
}
