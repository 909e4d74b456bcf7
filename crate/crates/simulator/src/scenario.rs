//! Scenario files: households, their items, and state-change behaviours.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rca_core::domain::{is_valid_home_id, is_valid_item_id};
use rca_core::{validate_value, ItemKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{GeneratorError, GeneratorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SimScenario {
    pub homes: Vec<SimHome>,
    #[serde(default)]
    pub behaviors: Vec<Behavior>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SimHome {
    pub home_id: String,
    pub items: Vec<SimItem>,
    /// Artificial delay before a received command takes effect.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub command_delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SimItem {
    pub item_id: String,
    pub kind: ItemKind,
    pub initial_value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Behavior {
    pub home_id: String,
    pub item_id: String,
    pub period_ms: u64,
    pub generator: GeneratorSpec,
    pub seed: u64,
    /// Delay of the first tick relative to the start; spreads load.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub offset_ms: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid home id {0:?}")]
    HomeId(String),
    #[error("duplicate home {0:?}")]
    DuplicateHome(String),
    #[error("home {home}: invalid item id {item:?}")]
    ItemId { home: String, item: String },
    #[error("home {home}: duplicate item {item:?}")]
    DuplicateItem { home: String, item: String },
    #[error("{home}/{item}: initial value {value:?} is not a valid {kind}")]
    InitialValue { home: String, item: String, kind: ItemKind, value: String },
    #[error("behaviour targets unknown item {home}/{item}")]
    UnknownTarget { home: String, item: String },
    #[error("behaviour on {home}/{item}: period must be positive")]
    Period { home: String, item: String },
    #[error("behaviour on {home}/{item}: {source}")]
    Generator { home: String, item: String, source: GeneratorError },
    #[error("scenario has no homes")]
    Empty,
}

impl SimScenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: SimScenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn item_count(&self) -> usize {
        self.homes.iter().map(|h| h.items.len()).sum()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.homes.is_empty() {
            return Err(ScenarioError::Empty);
        }
        let mut kinds: BTreeMap<(&str, &str), ItemKind> = BTreeMap::new();
        let mut homes = BTreeSet::new();
        for home in &self.homes {
            if !is_valid_home_id(&home.home_id) {
                return Err(ScenarioError::HomeId(home.home_id.clone()));
            }
            if !homes.insert(home.home_id.as_str()) {
                return Err(ScenarioError::DuplicateHome(home.home_id.clone()));
            }
            for item in &home.items {
                let err_ids = || (home.home_id.clone(), item.item_id.clone());
                if !is_valid_item_id(&item.item_id) {
                    let (home, item) = err_ids();
                    return Err(ScenarioError::ItemId { home, item });
                }
                if kinds.insert((&home.home_id, &item.item_id), item.kind).is_some() {
                    let (home, item) = err_ids();
                    return Err(ScenarioError::DuplicateItem { home, item });
                }
                if !validate_value(item.kind, &item.initial_value) {
                    let (home, id) = err_ids();
                    return Err(ScenarioError::InitialValue { home, item: id, kind: item.kind, value: item.initial_value.clone() });
                }
            }
        }
        for b in &self.behaviors {
            let (home, item) = (b.home_id.clone(), b.item_id.clone());
            let Some(kind) = kinds.get(&(b.home_id.as_str(), b.item_id.as_str())) else {
                return Err(ScenarioError::UnknownTarget { home, item });
            };
            if b.period_ms == 0 {
                return Err(ScenarioError::Period { home, item });
            }
            b.generator
                .check_kind(*kind)
                .map_err(|source| ScenarioError::Generator { home, item, source })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "homes": [{"homeId": "h1", "items": [
            {"itemId": "lamp", "kind": "Switch", "initialValue": "ON"},
            {"itemId": "bathroom", "kind": "Temperature", "initialValue": "20.5"}
        ], "commandDelayMs": 50}],
        "behaviors": [{"homeId": "h1", "itemId": "bathroom", "periodMs": 1000,
                       "generator": "randomwalk(18,24,0.3)", "seed": 9}]
    }"#;

    #[test]
    fn sample_round_trips() {
        let s = SimScenario::from_json(SAMPLE).unwrap();
        assert_eq!(s.item_count(), 2);
        assert_eq!(s.homes[0].command_delay_ms, 50);
        assert_eq!(SimScenario::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_scenarios() {
        let cases = [
            (r#"{"homes": []}"#, "no homes"),
            (r#"{"homes": [{"homeId": "h 1", "items": []}]}"#, "invalid home id"),
            (r#"{"homes": [{"homeId": "h1", "items": []}, {"homeId": "h1", "items": []}]}"#, "duplicate home"),
            (r#"{"homes": [{"homeId": "h1", "items": [{"itemId": "d", "kind": "Dimmer", "initialValue": "101"}]}]}"#, "not a valid Dimmer"),
            (r#"{"homes": [{"homeId": "h1", "items": [{"itemId": "d", "kind": "Dimmer", "initialValue": "1"}]}],
                 "behaviors": [{"homeId": "h1", "itemId": "x", "periodMs": 1, "generator": "toggle", "seed": 1}]}"#, "unknown item"),
            (r#"{"homes": [{"homeId": "h1", "items": [{"itemId": "d", "kind": "Dimmer", "initialValue": "1"}]}],
                 "behaviors": [{"homeId": "h1", "itemId": "d", "periodMs": 1, "generator": "toggle", "seed": 1}]}"#, "cannot drive"),
            (r#"{"homes": [{"homeId": "h1", "items": [{"itemId": "d", "kind": "Dimmer", "initialValue": "1"}]}],
                 "behaviors": [{"homeId": "h1", "itemId": "d", "periodMs": 0, "generator": "ramp(0,9,1)", "seed": 1}]}"#, "period"),
            (r#"{"homes": [{"homeId": "h1", "items": [], "extra": 1}]}"#, "unknown field"),
            (r#"{"homes": [{"homeId": "h1", "items": [{"itemId": "d", "kind": "Fan", "initialValue": "1"}]}]}"#, "unknown variant"),
        ];
        for (text, expect) in cases {
            let err = SimScenario::from_json(text).unwrap_err().to_string();
            assert!(err.contains(expect), "{err} should mention {expect}");
        }
    }
}
