//! Live runner: one broker session per household, wall-clock ticks.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use rca_broker::{command_topic, ClientOptions, MqttClient};
use rca_core::{Command, SharedClock};
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::engine::{decode_command, HomeSim, StateMsg};
use crate::scenario::SimScenario;

#[derive(Clone)]
pub struct RunOptions {
    pub clock: SharedClock,
    pub backoff_min: Duration,
    pub backoff_max: Duration,
}

impl RunOptions {
    pub fn new(clock: SharedClock) -> Self {
        Self { clock, backoff_min: Duration::from_millis(500), backoff_max: Duration::from_secs(8) }
    }
}

#[derive(Debug, Default)]
pub struct SimStats {
    pub published: AtomicU64,
    pub commands_applied: AtomicU64,
    pub commands_rejected: AtomicU64,
    pub connects: AtomicU64,
}

type Mirror = Arc<RwLock<HashMap<(String, String), String>>>;

/// Running simulation. Dropping it stops every household.
pub struct SimHandle {
    tasks: Vec<JoinHandle<()>>,
    stats: Arc<SimStats>,
    mirror: Mirror,
    stop_tx: watch::Sender<bool>,
    start_ms: u64,
}

impl SimHandle {
    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    pub fn published(&self) -> u64 {
        self.stats.published.load(Ordering::Relaxed)
    }

    /// Current simulated value of one item.
    pub fn value(&self, home_id: &str, item_id: &str) -> Option<String> {
        self.mirror.read().get(&(home_id.to_string(), item_id.to_string())).cloned()
    }

    /// Clock time the timeline started at; replaying the scenario from it
    /// reproduces every tick.
    pub fn start_ms(&self) -> u64 {
        self.start_ms
    }

    pub fn stop(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }

    /// Stops at a message boundary: every state counted as published has
    /// been flushed to the broker and each session ends with DISCONNECT.
    /// Returns the final published count.
    pub async fn shutdown(&mut self) -> u64 {
        let _ = self.stop_tx.send(true);
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
        self.published()
    }
}

impl Drop for SimHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Starts every household of `scenario` against the broker at `broker`.
/// Must be called inside a Tokio runtime.
pub fn run(scenario: &SimScenario, broker: &str, options: RunOptions) -> SimHandle {
    let stats = Arc::new(SimStats::default());
    let mirror: Mirror = Arc::new(RwLock::new(HashMap::new()));
    let timeline = Timeline { base_ms: options.clock.now_ms(), start: Instant::now() };
    let (stop, stop_rx) = watch::channel(false);
    let tasks = scenario
        .homes
        .iter()
        .map(|home| {
            let sim = HomeSim::new(home, &scenario.behaviors, timeline.base_ms);
            for (item, value) in sim.values() {
                mirror.write().insert((home.home_id.clone(), item.to_string()), value.to_string());
            }
            let task = HomeTask {
                sim,
                broker: broker.to_string(),
                options: options.clone(),
                stats: stats.clone(),
                mirror: mirror.clone(),
                timeline,
                pending: VecDeque::new(),
                stop: stop_rx.clone(),
            };
            tokio::spawn(task.run())
        })
        .collect();
    SimHandle { tasks, stats, mirror, stop_tx: stop, start_ms: timeline.base_ms }
}

#[derive(Clone, Copy)]
struct Timeline {
    base_ms: u64,
    start: Instant,
}

impl Timeline {
    fn now_ms(&self) -> u64 {
        self.base_ms + self.start.elapsed().as_millis() as u64
    }

    fn instant_at(&self, ms: u64) -> Instant {
        self.start + Duration::from_millis(ms.saturating_sub(self.base_ms))
    }
}

struct HomeTask {
    sim: HomeSim,
    broker: String,
    options: RunOptions,
    stats: Arc<SimStats>,
    mirror: Mirror,
    timeline: Timeline,
    /// Commands waiting out the household's artificial delay.
    pending: VecDeque<(u64, Command)>,
    stop: watch::Receiver<bool>,
}

impl HomeTask {
    async fn run(mut self) {
        let client_id = format!("hc-{}", self.sim.home_id());
        let mut backoff = self.options.backoff_min;
        loop {
            if *self.stop.borrow() {
                return;
            }
            let session = match MqttClient::connect(&self.broker, ClientOptions::new(client_id.clone())).await {
                Ok((client, rx)) => match client.subscribe(&[&command_topic(self.sim.home_id())]).await {
                    Ok(codes) if codes.iter().all(|c| *c != 0x80) => Some((client, rx)),
                    _ => None,
                },
                Err(e) => {
                    tracing::debug!(home = %self.sim.home_id(), error = %e, "broker unreachable");
                    None
                }
            };
            let Some((client, rx)) = session else {
                tokio::select! {
                    _ = tokio::time::sleep(backoff) => {}
                    _ = self.stop.changed() => {}
                }
                backoff = (backoff * 2).min(self.options.backoff_max);
                continue;
            };
            backoff = self.options.backoff_min;
            self.stats.connects.fetch_add(1, Ordering::Relaxed);
            self.session(&client, rx).await;
            tracing::info!(home = %self.sim.home_id(), "broker session lost; reconnecting");
        }
    }

    async fn publish(&self, client: &MqttClient, msgs: Vec<StateMsg>) -> bool {
        for m in msgs {
            self.mirror.write().insert((m.home_id.clone(), m.item_id.clone()), m.value.clone());
            if client.publish(&m.topic(), m.payload()).await.is_err() {
                return false;
            }
            self.stats.published.fetch_add(1, Ordering::Relaxed);
        }
        true
    }

    /// Serves one broker session until it drops.
    async fn session(&mut self, client: &MqttClient, mut rx: tokio::sync::mpsc::Receiver<rca_broker::Message>) {
        // Ticks missed while offline change state silently; the snapshot
        // republishes where every item ended up.
        let now = self.timeline.now_ms();
        let _ = self.sim.advance(now);
        if !self.publish(client, self.sim.snapshot(now)).await {
            return;
        }
        loop {
            let wake = [self.sim.next_due(), self.pending.front().map(|p| p.0)].into_iter().flatten().min();
            let deadline = wake.map(|ms| self.timeline.instant_at(ms));
            let sleep = async move {
                match deadline {
                    Some(at) => tokio::time::sleep_until(at).await,
                    None => std::future::pending().await,
                }
            };
            tokio::select! {
                msg = rx.recv() => {
                    let Some(msg) = msg else { return };
                    match decode_command(&msg.payload) {
                        Ok(cmd) => {
                            let due = self.timeline.now_ms() + self.sim.command_delay_ms();
                            self.pending.push_back((due, cmd));
                        }
                        Err(e) => {
                            self.stats.commands_rejected.fetch_add(1, Ordering::Relaxed);
                            tracing::warn!(home = %self.sim.home_id(), error = %e, "ignoring command");
                        }
                    }
                }
                _ = sleep => {}
                _ = self.stop.changed() => {}
            }
            if *self.stop.borrow() {
                client.disconnect().await;
                let flushed = tokio::time::Instant::now() + Duration::from_secs(2);
                while client.is_connected() && tokio::time::Instant::now() < flushed {
                    tokio::time::sleep(Duration::from_millis(10)).await;
                }
                return;
            }
            let now = self.timeline.now_ms();
            let mut out = Vec::new();
            while self.pending.front().is_some_and(|p| p.0 <= now) {
                let (_, cmd) = self.pending.pop_front().expect("checked non-empty");
                match self.sim.apply(&cmd, now) {
                    Ok(msg) => {
                        self.stats.commands_applied.fetch_add(1, Ordering::Relaxed);
                        out.push(msg);
                    }
                    Err(e) => {
                        self.stats.commands_rejected.fetch_add(1, Ordering::Relaxed);
                        tracing::warn!(home = %self.sim.home_id(), command = %cmd.command_id, error = %e, "ignoring command");
                    }
                }
            }
            out.extend(self.sim.advance(now));
            if !self.publish(client, out).await {
                return;
            }
        }
    }
}
