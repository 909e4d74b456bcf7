//! Orchestration harness: brings the whole platform up from a profile,
//! either as supervised child processes or inside the calling process,
//! and injects faults into it.

pub mod control;
pub mod node;
pub mod profile;
pub mod stack;

pub use node::{Node, NodeConfig, NodeKind};
pub use profile::{FleetSpec, Mode, NodeSpec, Profile, ProfileError, SimulatorSpec};
pub use stack::{find_node_binary, ComponentInfo, ComponentState, Event, Fault, FaultHandle, Stack, StackError};
