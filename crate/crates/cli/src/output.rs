//! Typed views of gateway responses and their human rendering.
//!
//! The `--json` output of each command is exactly the serialization of one
//! of these types, so field names here are the CLI's stable schema.

use std::collections::BTreeMap;

use rca_core::{AccessItem, AccessMode, Command, DeviceState, ItemKind, Role};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Session {
    pub username: String,
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LoggedOut {
    pub logged_out: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct User {
    pub username: String,
    pub roles: Vec<Role>,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PasswordChanged {
    pub username: String,
    pub password_changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Grant {
    pub username: String,
    pub access_item: AccessItem,
    pub mode: AccessMode,
    pub granted_by: String,
    pub granted_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Revoked {
    pub username: String,
    pub access_item: AccessItem,
    pub mode: AccessMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HomeSummary {
    pub home_id: String,
    pub label: String,
    pub item_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Item {
    pub item_id: String,
    pub kind: ItemKind,
    pub label: String,
    pub state: Option<DeviceState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Home {
    pub home_id: String,
    pub label: String,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Dispatched {
    pub command_id: String,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Instance {
    pub instance_id: String,
    pub base_url: String,
    pub lease_expiry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Status {
    pub services: BTreeMap<String, Vec<Instance>>,
    pub breakers: BTreeMap<String, String>,
}

/// Anything a command prints.
pub trait Render: Serialize {
    fn human(&self) -> String;
}

/// Milliseconds since the epoch as RFC 3339 UTC.
pub fn time(ms: u64) -> String {
    i64::try_from(ms)
        .ok()
        .and_then(chrono::DateTime::from_timestamp_millis)
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
        .unwrap_or_else(|| ms.to_string())
}

/// Left-aligned columns separated by two spaces; no trailing whitespace.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i + 1 == cells.len() {
                s.push_str(cell);
            } else {
                s.push_str(&format!("{cell:<w$}  "));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

impl Render for Session {
    fn human(&self) -> String {
        format!("logged in as {} (session expires {})\n", self.username, time(self.expires_at))
    }
}

impl Render for LoggedOut {
    fn human(&self) -> String {
        if self.logged_out { "logged out\n" } else { "no stored session\n" }.to_string()
    }
}

impl Render for User {
    fn human(&self) -> String {
        let roles: Vec<&str> = self.roles.iter().map(|r| r.as_str()).collect();
        format!("created user {} (roles: {})\n", self.username, roles.join(", "))
    }
}

impl Render for PasswordChanged {
    fn human(&self) -> String {
        format!("password changed for {}\n", self.username)
    }
}

impl Render for Grant {
    fn human(&self) -> String {
        format!("granted {} on {} to {}\n", self.mode, self.access_item, self.username)
    }
}

impl Render for Revoked {
    fn human(&self) -> String {
        format!("revoked {} on {} from {}\n", self.mode, self.access_item, self.username)
    }
}

impl Render for Vec<Grant> {
    fn human(&self) -> String {
        if self.is_empty() {
            return "no grants\n".into();
        }
        let rows: Vec<Vec<String>> = self
            .iter()
            .map(|g| vec![g.access_item.to_string(), g.mode.to_string(), g.granted_by.clone(), time(g.granted_at)])
            .collect();
        table(&["ACCESS ITEM", "MODE", "GRANTED BY", "GRANTED AT"], &rows)
    }
}

impl Render for Vec<HomeSummary> {
    fn human(&self) -> String {
        if self.is_empty() {
            return "no readable homes\n".into();
        }
        let rows: Vec<Vec<String>> =
            self.iter().map(|h| vec![h.home_id.clone(), h.label.clone(), h.item_count.to_string()]).collect();
        table(&["HOME", "LABEL", "ITEMS"], &rows)
    }
}

impl Render for Home {
    fn human(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .items
            .iter()
            .map(|i| {
                let (value, at) = match &i.state {
                    Some(s) => (s.value.clone(), time(s.timestamp)),
                    None => ("-".into(), "-".into()),
                };
                vec![i.item_id.clone(), i.kind.to_string(), i.label.clone(), value, at]
            })
            .collect();
        format!("{} ({})\n", self.home_id, self.label) + &table(&["ITEM", "KIND", "LABEL", "VALUE", "UPDATED"], &rows)
    }
}

impl Render for Vec<DeviceState> {
    fn human(&self) -> String {
        if self.is_empty() {
            return "no states in range\n".into();
        }
        let rows: Vec<Vec<String>> = self.iter().map(|s| vec![time(s.timestamp), s.value.clone()]).collect();
        table(&["TIMESTAMP", "VALUE"], &rows)
    }
}

impl Render for Dispatched {
    fn human(&self) -> String {
        format!("command {} {}\n", self.command_id, self.status)
    }
}

impl Render for Vec<Command> {
    fn human(&self) -> String {
        if self.is_empty() {
            return "no commands\n".into();
        }
        let rows: Vec<Vec<String>> = self
            .iter()
            .map(|c| {
                vec![
                    time(c.issued_at),
                    c.item_id.clone(),
                    c.value.clone(),
                    c.issued_by.clone(),
                    c.label.clone().unwrap_or_default(),
                    c.command_id.clone(),
                ]
            })
            .collect();
        table(&["ISSUED AT", "ITEM", "VALUE", "BY", "LABEL", "COMMAND"], &rows)
    }
}

impl Render for Status {
    fn human(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .services
            .iter()
            .map(|(name, list)| {
                let breaker = self.breakers.get(name).cloned().unwrap_or_else(|| "-".into());
                let urls: Vec<&str> = list.iter().map(|i| i.base_url.as_str()).collect();
                vec![name.clone(), list.len().to_string(), breaker, urls.join(" ")]
            })
            .collect();
        table(&["SERVICE", "INSTANCES", "BREAKER", "ENDPOINTS"], &rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn home() -> Home {
        Home {
            home_id: "h1".into(),
            label: "Grandma's flat".into(),
            items: vec![
                Item {
                    item_id: "lamp".into(),
                    kind: ItemKind::Switch,
                    label: "Lamp".into(),
                    state: Some(DeviceState { timestamp: 1_700_000_000_000, value: "ON".into(), seq: 4 }),
                },
                Item { item_id: "thermo".into(), kind: ItemKind::Temperature, label: "Living room".into(), state: None },
            ],
        }
    }

    #[test]
    fn home_table_snapshot() {
        let expected = "\
h1 (Grandma's flat)
ITEM    KIND         LABEL        VALUE  UPDATED
lamp    Switch       Lamp         ON     2023-11-14T22:13:20.000Z
thermo  Temperature  Living room  -      -
";
        assert_eq!(home().human(), expected);
    }

    #[test]
    fn home_json_schema_snapshot() {
        let json = serde_json::to_value(home()).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "homeId": "h1",
                "label": "Grandma's flat",
                "items": [
                    {"itemId": "lamp", "kind": "Switch", "label": "Lamp",
                     "state": {"timestamp": 1_700_000_000_000u64, "value": "ON", "seq": 4}},
                    {"itemId": "thermo", "kind": "Temperature", "label": "Living room", "state": null}
                ]
            })
        );
    }

    #[test]
    fn status_table_shows_empty_services() {
        let status: Status = serde_json::from_value(serde_json::json!({
            "services": {
                "history": [],
                "security": [{"instanceId": "s1", "baseUrl": "http://127.0.0.1:9001", "leaseExpiry": 5}]
            },
            "breakers": {"history": "open"}
        }))
        .unwrap();
        let expected = "\
SERVICE   INSTANCES  BREAKER  ENDPOINTS
history   0          open
security  1          -        http://127.0.0.1:9001
";
        assert_eq!(status.human(), expected);
    }

    #[test]
    fn grant_list_snapshot() {
        let grants = vec![Grant {
            username: "mia".into(),
            access_item: AccessItem::home("h1").unwrap(),
            mode: AccessMode::Write,
            granted_by: "admin".into(),
            granted_at: 0,
        }];
        assert_eq!(
            grants.human(),
            "ACCESS ITEM  MODE   GRANTED BY  GRANTED AT\nhome/h1      Write  admin       1970-01-01T00:00:00.000Z\n"
        );
        assert_eq!(
            serde_json::to_string(&grants).unwrap(),
            r#"[{"username":"mia","accessItem":"home/h1","mode":"Write","grantedBy":"admin","grantedAt":0}]"#
        );
        assert_eq!(Vec::<Grant>::new().human(), "no grants\n");
    }

    #[test]
    fn command_log_snapshot() {
        let log = vec![Command {
            command_id: "c-1".into(),
            home_id: "h1".into(),
            item_id: "lamp".into(),
            value: "OFF".into(),
            label: Some("night".into()),
            issued_by: "carla".into(),
            issued_at: 1_000,
        }];
        assert_eq!(
            log.human(),
            "ISSUED AT                 ITEM  VALUE  BY     LABEL  COMMAND\n\
             1970-01-01T00:00:01.000Z  lamp  OFF    carla  night  c-1\n"
        );
    }

    #[test]
    fn table_pads_by_characters_not_bytes() {
        let t = table(&["A", "B"], &[vec!["äö".into(), "x".into()], vec!["abcd".into(), "y".into()]]);
        assert_eq!(t, "A     B\näö    x\nabcd  y\n");
    }
}
