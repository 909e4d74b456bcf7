//! Simulated smart-home households: they publish device telemetry over MQTT
//! and execute the commands addressed to them.

pub mod engine;
pub mod fleet;
pub mod generator;
pub mod runner;
pub mod scenario;

pub use engine::{decode_command, CommandRejected, HomeSim, SimEngine, StateMsg};
pub use fleet::{generate_fleet, generate_fleet_with_period, FleetError};
pub use generator::GeneratorSpec;
pub use runner::{run, RunOptions, SimHandle, SimStats};
pub use scenario::{Behavior, ScenarioError, SimHome, SimItem, SimScenario};
