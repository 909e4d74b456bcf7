//! MQTT 3.1.1 subset broker (QoS0 only) carrying smart-home telemetry and
//! commands, plus the small client the platform services use to talk to it.
//!
//! Platform topics:
//! - telemetry: `rca/state/{homeId}/{itemId}` with `{"value": .., "timestamp": ..}`
//! - commands:  `rca/command/{homeId}` with a JSON `Command`

pub mod client;
pub mod codec;
pub mod server;
pub mod topic;

pub use client::{ClientError, ClientOptions, Message, MqttClient};
pub use server::{start, BrokerConfig, BrokerStats, RunningBroker, SessionTable};
pub use topic::{topic_matches, TopicError, TopicFilter, TopicName};

pub const STATE_TOPIC_PREFIX: &str = "rca/state";
pub const COMMAND_TOPIC_PREFIX: &str = "rca/command";

pub fn state_topic(home_id: &str, item_id: &str) -> String {
    format!("{STATE_TOPIC_PREFIX}/{home_id}/{item_id}")
}

pub fn command_topic(home_id: &str) -> String {
    format!("{COMMAND_TOPIC_PREFIX}/{home_id}")
}

/// Splits `rca/state/{homeId}/{itemId}` into its identifiers. Item ids may
/// themselves contain `/`.
pub fn parse_state_topic(topic: &str) -> Option<(&str, &str)> {
    let rest = topic.strip_prefix(STATE_TOPIC_PREFIX)?.strip_prefix('/')?;
    let (home, item) = rest.split_once('/')?;
    (!home.is_empty() && !item.is_empty()).then_some((home, item))
}

pub fn parse_command_topic(topic: &str) -> Option<&str> {
    let home = topic.strip_prefix(COMMAND_TOPIC_PREFIX)?.strip_prefix('/')?;
    (!home.is_empty() && !home.contains('/')).then_some(home)
}
