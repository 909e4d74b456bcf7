//! Stack profiles: which components run, on which ports, with which flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rca_core::resilience::BreakerConfig;
use rca_services::DEV_SECRET;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("cannot read profile {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed profile: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{component}: unknown flag `{flag}`")]
    UnknownFlag { component: String, flag: String },
    #[error("simulator: set exactly one of `scenario` and `fleet`")]
    Simulator,
    #[error("at least one history instance is required")]
    NoHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every component is a supervised `rca-node` child process.
    #[default]
    Process,
    /// Every component runs as tasks of the calling process.
    Inproc,
}

/// One service instance. Port 0 picks a free port at first start; restarts
/// reuse whatever port was bound.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct NodeSpec {
    pub port: u16,
    /// Overrides merged into the component's configuration document.
    pub flags: serde_json::Map<String, serde_json::Value>,
    /// Extra environment for the child process (process mode only).
    pub env: BTreeMap<String, String>,
}

impl NodeSpec {
    pub fn port(port: u16) -> Self {
        Self { port, ..Self::default() }
    }

    pub fn flag(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.flags.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct BrokerSpec {
    pub port: u16,
    pub outbound_queue: usize,
    pub env: BTreeMap<String, String>,
}

impl Default for BrokerSpec {
    fn default() -> Self {
        Self { port: 0, outbound_queue: 1024, env: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct DiscoverySpec {
    pub port: u16,
    pub ttl_ms: u64,
    pub sweep_ms: u64,
    pub env: BTreeMap<String, String>,
}

impl Default for DiscoverySpec {
    fn default() -> Self {
        Self { port: 0, ttl_ms: 30_000, sweep_ms: 5_000, env: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FleetSpec {
    pub homes: usize,
    pub items: usize,
    pub seed: u64,
    #[serde(default = "default_period")]
    pub period_ms: u64,
}

fn default_period() -> u64 {
    rca_simulator::fleet::DEFAULT_PERIOD_MS
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct SimulatorSpec {
    /// Scenario file, relative to the profile's directory.
    pub scenario: Option<PathBuf>,
    pub fleet: Option<FleetSpec>,
    /// Inline scenario document.
    pub inline: Option<serde_json::Value>,
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct Profile {
    pub mode: Mode,
    /// Logs, data, configs and the event log. A fresh temporary directory
    /// (removed on teardown) when unset.
    pub run_dir: Option<PathBuf>,
    pub token_secret: String,
    pub admin_password: String,
    pub hash_iterations: u32,
    pub heartbeat_ms: u64,
    pub startup_timeout_ms: u64,
    pub breaker: BreakerConfig,
    pub broker: BrokerSpec,
    pub discovery: DiscoverySpec,
    pub security: NodeSpec,
    pub access_control: NodeSpec,
    pub history: Vec<NodeSpec>,
    pub remote_control: NodeSpec,
    pub gateway: NodeSpec,
    pub simulator: Option<SimulatorSpec>,
}

impl Default for Profile {
    fn default() -> Self {
        Self {
            mode: Mode::Process,
            run_dir: None,
            token_secret: DEV_SECRET.into(),
            admin_password: "admin-change-me".into(),
            hash_iterations: rca_services::security::DEFAULT_ITERATIONS,
            heartbeat_ms: 5_000,
            startup_timeout_ms: 15_000,
            breaker: BreakerConfig::default(),
            broker: BrokerSpec::default(),
            discovery: DiscoverySpec::default(),
            security: NodeSpec::default(),
            access_control: NodeSpec::default(),
            history: vec![NodeSpec::default()],
            remote_control: NodeSpec::default(),
            gateway: NodeSpec::default(),
            simulator: None,
        }
    }
}

impl Profile {
    /// All ports automatic, every component in this process.
    pub fn inproc() -> Self {
        Self { mode: Mode::Inproc, ..Self::default() }
    }

    pub fn process() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let profile: Profile = serde_json::from_str(text)?;
        profile.check()?;
        Ok(profile)
    }

    /// Loads a profile; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io { path: path.to_path_buf(), source })?;
        let mut profile = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(dir) = profile.run_dir.as_mut() {
            rebase(dir);
        }
        if let Some(sim) = profile.simulator.as_mut() {
            if let Some(s) = sim.scenario.as_mut() {
                rebase(s);
            }
        }
        Ok(profile)
    }

    pub fn check(&self) -> Result<(), ProfileError> {
        if self.history.is_empty() {
            return Err(ProfileError::NoHistory);
        }
        if let Some(sim) = &self.simulator {
            let sources = [sim.scenario.is_some(), sim.fleet.is_some(), sim.inline.is_some()];
            if sources.iter().filter(|s| **s).count() != 1 {
                return Err(ProfileError::Simulator);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_profile_takes_defaults() {
        let p = Profile::from_json(r#"{"mode": "inproc", "gateway": {"port": 8080}}"#).unwrap();
        assert_eq!(p.mode, Mode::Inproc);
        assert_eq!(p.gateway.port, 8080);
        assert_eq!(p.history.len(), 1);
        assert_eq!(p.discovery.ttl_ms, 30_000);
        assert_eq!(p.breaker.failure_threshold, 5);
    }

    #[test]
    fn rejects_typos_and_ambiguous_simulator() {
        assert!(matches!(Profile::from_json(r#"{"gatway": {}}"#), Err(ProfileError::Json(_))));
        assert!(matches!(Profile::from_json(r#"{"history": []}"#), Err(ProfileError::NoHistory)));
        let both = r#"{"simulator": {"scenario": "a.json", "fleet": {"homes": 1, "items": 1, "seed": 1}}}"#;
        assert!(matches!(Profile::from_json(both), Err(ProfileError::Simulator)));
    }

    #[test]
    fn relative_paths_follow_the_profile_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        std::fs::write(&path, r#"{"runDir": "run", "simulator": {"scenario": "s.json"}}"#).unwrap();
        let p = Profile::load(&path).unwrap();
        assert_eq!(p.run_dir, Some(dir.path().join("run")));
        assert_eq!(p.simulator.unwrap().scenario, Some(dir.path().join("s.json")));
    }
}
