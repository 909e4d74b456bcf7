//! Deterministic household state machines, driven by explicit timestamps.
//! The live runner feeds them wall-clock time; tests feed a simulated one.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rca_broker::state_topic;
use rca_core::{validate_value, Command, ItemKind};
use serde::Serialize;
use thiserror::Error;

use crate::generator::GeneratorSpec;
use crate::scenario::{Behavior, SimHome, SimScenario};

/// One telemetry message, ready for `rca/state/{homeId}/{itemId}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateMsg {
    pub home_id: String,
    pub item_id: String,
    pub kind: ItemKind,
    pub value: String,
    pub timestamp: u64,
}

#[derive(Serialize)]
struct Payload<'a> {
    value: &'a str,
    timestamp: u64,
    kind: ItemKind,
}

impl StateMsg {
    pub fn topic(&self) -> String {
        state_topic(&self.home_id, &self.item_id)
    }

    pub fn payload(&self) -> Vec<u8> {
        serde_json::to_vec(&Payload { value: &self.value, timestamp: self.timestamp, kind: self.kind })
            .expect("payload serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommandRejected {
    #[error("command payload is not a command: {0}")]
    Malformed(String),
    #[error("command addressed to home {0}")]
    WrongHome(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("value {value:?} is not a valid {kind}")]
    InvalidValue { kind: ItemKind, value: String },
}

pub fn decode_command(payload: &[u8]) -> Result<Command, CommandRejected> {
    serde_json::from_slice(payload).map_err(|e| CommandRejected::Malformed(e.to_string()))
}

struct Ticker {
    item_id: String,
    spec: GeneratorSpec,
    period_ms: u64,
    next_due: u64,
    rng: ChaCha8Rng,
}

/// One household: item values plus the behaviours that change them.
pub struct HomeSim {
    home_id: String,
    command_delay_ms: u64,
    items: BTreeMap<String, (ItemKind, String)>,
    tickers: Vec<Ticker>,
}

impl HomeSim {
    pub fn new<'a>(home: &SimHome, behaviors: impl IntoIterator<Item = &'a Behavior>, start_ms: u64) -> Self {
        let items = home
            .items
            .iter()
            .map(|i| (i.item_id.clone(), (i.kind, i.initial_value.clone())))
            .collect();
        let tickers = behaviors
            .into_iter()
            .filter(|b| b.home_id == home.home_id)
            .map(|b| Ticker {
                item_id: b.item_id.clone(),
                spec: b.generator,
                period_ms: b.period_ms.max(1),
                next_due: start_ms + b.offset_ms + b.period_ms.max(1),
                rng: ChaCha8Rng::seed_from_u64(b.seed),
            })
            .collect();
        Self { home_id: home.home_id.clone(), command_delay_ms: home.command_delay_ms, items, tickers }
    }

    pub fn home_id(&self) -> &str {
        &self.home_id
    }

    pub fn command_delay_ms(&self) -> u64 {
        self.command_delay_ms
    }

    pub fn value(&self, item_id: &str) -> Option<&str> {
        self.items.get(item_id).map(|(_, v)| v.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = (&str, &str)> {
        self.items.iter().map(|(k, (_, v))| (k.as_str(), v.as_str()))
    }

    fn msg(&self, item_id: &str, timestamp: u64) -> StateMsg {
        let (kind, value) = &self.items[item_id];
        StateMsg { home_id: self.home_id.clone(), item_id: item_id.to_string(), kind: *kind, value: value.clone(), timestamp }
    }

    /// Every item's current value, stamped `now`: the initial publish and
    /// the republish after a reconnect.
    pub fn snapshot(&self, now: u64) -> Vec<StateMsg> {
        self.items.keys().map(|id| self.msg(id, now)).collect()
    }

    pub fn next_due(&self) -> Option<u64> {
        self.tickers.iter().map(|t| t.next_due).min()
    }

    /// Fires every behaviour tick due at or before `now`, oldest first
    /// (ties in declaration order). Each state carries its tick time.
    pub fn advance(&mut self, now: u64) -> Vec<StateMsg> {
        let mut out = Vec::new();
        loop {
            let Some((ix, due)) = self
                .tickers
                .iter()
                .enumerate()
                .filter(|(_, t)| t.next_due <= now)
                .min_by_key(|(i, t)| (t.next_due, *i))
                .map(|(i, t)| (i, t.next_due))
            else {
                return out;
            };
            let t = &mut self.tickers[ix];
            t.next_due += t.period_ms;
            let (kind, value) = self.items.get_mut(&t.item_id).expect("validated behaviour target");
            *value = t.spec.next_value(*kind, value, &mut t.rng);
            let item = t.item_id.clone();
            out.push(self.msg(&item, due));
        }
    }

    /// Executes a command: validates it, sets the value, and returns the
    /// state to publish. Rejected commands leave the home untouched.
    pub fn apply(&mut self, cmd: &Command, now: u64) -> Result<StateMsg, CommandRejected> {
        if cmd.home_id != self.home_id {
            return Err(CommandRejected::WrongHome(cmd.home_id.clone()));
        }
        let (kind, value) = self
            .items
            .get_mut(&cmd.item_id)
            .ok_or_else(|| CommandRejected::UnknownItem(cmd.item_id.clone()))?;
        if !validate_value(*kind, &cmd.value) {
            return Err(CommandRejected::InvalidValue { kind: *kind, value: cmd.value.clone() });
        }
        *value = cmd.value.clone();
        Ok(self.msg(&cmd.item_id, now))
    }
}

/// A whole fleet on one simulated timeline.
pub struct SimEngine {
    homes: Vec<HomeSim>,
    index: BTreeMap<String, usize>,
    start_ms: u64,
}

impl SimEngine {
    pub fn new(scenario: &SimScenario, start_ms: u64) -> Self {
        let homes: Vec<HomeSim> = scenario
            .homes
            .iter()
            .map(|h| HomeSim::new(h, &scenario.behaviors, start_ms))
            .collect();
        let index = homes.iter().enumerate().map(|(i, h)| (h.home_id.clone(), i)).collect();
        Self { homes, index, start_ms }
    }

    pub fn initial(&self) -> Vec<StateMsg> {
        self.homes.iter().flat_map(|h| h.snapshot(self.start_ms)).collect()
    }

    /// All ticks up to `now`, merged across homes by (time, home order).
    pub fn advance_to(&mut self, now: u64) -> Vec<StateMsg> {
        let mut heap: BinaryHeap<Reverse<(u64, usize)>> = self
            .homes
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.next_due().filter(|d| *d <= now).map(|d| Reverse((d, i))))
            .collect();
        let mut out = Vec::new();
        while let Some(Reverse((due, i))) = heap.pop() {
            out.extend(self.homes[i].advance(due));
            if let Some(next) = self.homes[i].next_due().filter(|d| *d <= now) {
                heap.push(Reverse((next, i)));
            }
        }
        out
    }

    pub fn command(&mut self, cmd: &Command, now: u64) -> Result<StateMsg, CommandRejected> {
        let ix = *self.index.get(&cmd.home_id).ok_or_else(|| CommandRejected::WrongHome(cmd.home_id.clone()))?;
        self.homes[ix].apply(cmd, now)
    }

    pub fn home(&self, home_id: &str) -> Option<&HomeSim> {
        self.index.get(home_id).map(|i| &self.homes[*i])
    }

    pub fn homes(&self) -> &[HomeSim] {
        &self.homes
    }
}
