//! One platform component, started from a self-contained config document.
//! The same document drives an in-process start and an `rca-node` child.

use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;
use std::time::Duration;

use rca_broker::{BrokerConfig, RunningBroker};
use rca_core::SharedClock;
use rca_services::{access, control, discovery, gateway, history, security, RunningService};
use rca_simulator::{RunOptions, SimHandle, SimScenario};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Broker,
    Discovery,
    Security,
    AccessControl,
    History,
    RemoteControl,
    Gateway,
    Simulator,
}

impl NodeKind {
    pub const ALL: [NodeKind; 8] = [
        NodeKind::Broker,
        NodeKind::Discovery,
        NodeKind::Security,
        NodeKind::AccessControl,
        NodeKind::History,
        NodeKind::RemoteControl,
        NodeKind::Gateway,
        NodeKind::Simulator,
    ];

    /// Also the name the component registers under in discovery.
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Broker => "broker",
            NodeKind::Discovery => "discovery",
            NodeKind::Security => security::SERVICE_NAME,
            NodeKind::AccessControl => access::SERVICE_NAME,
            NodeKind::History => history::SERVICE_NAME,
            NodeKind::RemoteControl => control::SERVICE_NAME,
            NodeKind::Gateway => gateway::SERVICE_NAME,
            NodeKind::Simulator => "simulator",
        }
    }

    /// Whether the component registers itself in discovery.
    pub fn registers(self) -> bool {
        !matches!(self, NodeKind::Broker | NodeKind::Discovery | NodeKind::Simulator)
    }

    pub fn serves_http(self) -> bool {
        !matches!(self, NodeKind::Broker | NodeKind::Simulator)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_ascii_lowercase();
        NodeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == folded)
            .ok_or_else(|| format!("unknown component `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BrokerNodeConfig {
    pub bind: SocketAddr,
    pub outbound_queue: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimulatorNodeConfig {
    pub broker: String,
    pub scenario: SimScenario,
}

/// Complete configuration of one component.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum NodeConfig {
    Broker(BrokerNodeConfig),
    Discovery(discovery::DiscoveryConfig),
    Security(security::SecurityConfig),
    AccessControl(access::AccessConfig),
    History(history::HistoryConfig),
    RemoteControl(control::ControlConfig),
    Gateway(gateway::GatewayConfig),
    Simulator(SimulatorNodeConfig),
}

impl NodeConfig {
    pub fn kind(&self) -> NodeKind {
        match self {
            NodeConfig::Broker(_) => NodeKind::Broker,
            NodeConfig::Discovery(_) => NodeKind::Discovery,
            NodeConfig::Security(_) => NodeKind::Security,
            NodeConfig::AccessControl(_) => NodeKind::AccessControl,
            NodeConfig::History(_) => NodeKind::History,
            NodeConfig::RemoteControl(_) => NodeKind::RemoteControl,
            NodeConfig::Gateway(_) => NodeKind::Gateway,
            NodeConfig::Simulator(_) => NodeKind::Simulator,
        }
    }

    /// The listening address; `None` for the simulator.
    pub fn bind(&self) -> Option<SocketAddr> {
        match self {
            NodeConfig::Broker(c) => Some(c.bind),
            NodeConfig::Discovery(c) => Some(c.bind),
            NodeConfig::Security(c) => Some(c.service.bind),
            NodeConfig::AccessControl(c) => Some(c.service.bind),
            NodeConfig::History(c) => Some(c.service.bind),
            NodeConfig::RemoteControl(c) => Some(c.service.bind),
            NodeConfig::Gateway(c) => Some(c.service.bind),
            NodeConfig::Simulator(_) => None,
        }
    }

    pub fn set_bind(&mut self, addr: SocketAddr) {
        match self {
            NodeConfig::Broker(c) => c.bind = addr,
            NodeConfig::Discovery(c) => c.bind = addr,
            NodeConfig::Security(c) => c.service.bind = addr,
            NodeConfig::AccessControl(c) => c.service.bind = addr,
            NodeConfig::History(c) => c.service.bind = addr,
            NodeConfig::RemoteControl(c) => c.service.bind = addr,
            NodeConfig::Gateway(c) => c.service.bind = addr,
            NodeConfig::Simulator(_) => {}
        }
    }
}

/// A component running inside this process. Dropping it stops it.
pub enum Node {
    Broker(RunningBroker),
    Service(RunningService),
    History(history::RunningHistory),
    Simulator(SimHandle),
}

impl Node {
    pub fn addr(&self) -> Option<SocketAddr> {
        match self {
            Node::Broker(b) => Some(b.local_addr()),
            Node::Service(s) => Some(s.addr),
            Node::History(h) => Some(h.service.addr),
            Node::Simulator(_) => None,
        }
    }

    fn service(&self) -> Option<&RunningService> {
        match self {
            Node::Service(s) => Some(s),
            Node::History(h) => Some(&h.service),
            _ => None,
        }
    }

    /// Stalls HTTP handling; `false` when the component serves no HTTP.
    pub fn pause(&self) -> bool {
        self.service().map(|s| s.pause()).is_some()
    }

    pub fn resume(&self) -> bool {
        self.service().map(|s| s.resume()).is_some()
    }
}

/// Starts a component inside the current Tokio runtime.
pub async fn start(config: NodeConfig, clock: SharedClock) -> std::io::Result<Node> {
    Ok(match config {
        NodeConfig::Broker(c) => Node::Broker(
            rca_broker::start(
                BrokerConfig { bind: c.bind, outbound_queue: c.outbound_queue, ..BrokerConfig::default() },
                clock,
            )
            .await?,
        ),
        NodeConfig::Discovery(c) => Node::Service(discovery::start(c, clock).await?),
        NodeConfig::Security(c) => Node::Service(security::start(c, clock).await?),
        NodeConfig::AccessControl(c) => Node::Service(access::start(c, clock).await?),
        NodeConfig::History(c) => Node::History(history::start(c, clock).await?),
        NodeConfig::RemoteControl(c) => Node::Service(control::start(c, clock).await?),
        NodeConfig::Gateway(c) => Node::Service(gateway::start(c, clock).await?),
        NodeConfig::Simulator(c) => {
            let options = RunOptions {
                backoff_min: Duration::from_millis(200),
                backoff_max: Duration::from_secs(2),
                ..RunOptions::new(clock)
            };
            Node::Simulator(rca_simulator::run(&c.scenario, &c.broker, options))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_leniently() {
        assert_eq!("access-control".parse(), Ok(NodeKind::AccessControl));
        assert_eq!("accesscontrol".parse(), Ok(NodeKind::AccessControl));
        assert_eq!("Remote_Control".parse(), Ok(NodeKind::RemoteControl));
        assert!("database".parse::<NodeKind>().is_err());
        for k in NodeKind::ALL {
            assert_eq!(k.as_str().parse(), Ok(k));
        }
    }

    #[test]
    fn config_documents_round_trip() {
        let cfg = NodeConfig::Broker(BrokerNodeConfig { bind: "127.0.0.1:1883".parse().unwrap(), outbound_queue: 7 });
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(text, r#"{"kind":"broker","config":{"bind":"127.0.0.1:1883","outboundQueue":7}}"#);
        let back: NodeConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.kind(), NodeKind::Broker);
        assert_eq!(back.bind(), Some("127.0.0.1:1883".parse().unwrap()));
    }
}
