//! Smart-home domain model shared by every service.
//!
//! Telemetry is modelled as [`DeviceState`] values attached to [`DeviceItem`]s,
//! which are grouped into [`SmartHome`]s. Remote control is expressed through
//! [`Command`]s, and authorization through [`AccessItem`] keys paired with an
//! [`AccessMode`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum size of a `Text` item value in bytes.
pub const MAX_TEXT_BYTES: usize = 1024;

/// Maximum length of a home or item identifier.
pub const MAX_ID_BYTES: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("malformed identifier: {0:?}")]
    MalformedIdentifier(String),
    #[error("malformed access item: {0:?}")]
    MalformedAccessItem(String),
    #[error("unknown access mode: {0:?}")]
    UnknownMode(String),
    #[error("unknown item kind: {0:?}")]
    UnknownKind(String),
}

/// A single observed value of a device item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceState {
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub value: String,
    /// Ingestion sequence number, assigned by the history store.
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ItemKind {
    Switch,
    Dimmer,
    Color,
    Temperature,
    Text,
}

impl ItemKind {
    pub const ALL: [ItemKind; 5] = [
        ItemKind::Switch,
        ItemKind::Dimmer,
        ItemKind::Color,
        ItemKind::Temperature,
        ItemKind::Text,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ItemKind::Switch => "Switch",
            ItemKind::Dimmer => "Dimmer",
            ItemKind::Color => "Color",
            ItemKind::Temperature => "Temperature",
            ItemKind::Text => "Text",
        }
    }
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ItemKind {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ItemKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| DomainError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceItem {
    pub item_id: String,
    pub kind: ItemKind,
    pub label: String,
    #[serde(default)]
    pub states: Vec<DeviceState>,
}

impl DeviceItem {
    pub fn new(item_id: impl Into<String>, kind: ItemKind) -> Self {
        let item_id = item_id.into();
        Self {
            label: item_id.clone(),
            item_id,
            kind,
            states: Vec::new(),
        }
    }

    pub fn current_state(&self) -> Option<&DeviceState> {
        current_state(&self.states)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SmartHome {
    pub home_id: String,
    pub label: String,
    #[serde(default)]
    pub items: BTreeMap<String, DeviceItem>,
}

/// A descriptive instruction targeting one item of one household.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Command {
    pub command_id: String,
    pub home_id: String,
    pub item_id: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub issued_by: String,
    pub issued_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AccessMode {
    Read,
    Write,
}

impl AccessMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AccessMode::Read => "Read",
            AccessMode::Write => "Write",
        }
    }
}

impl fmt::Display for AccessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AccessMode {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("read") {
            Ok(AccessMode::Read)
        } else if s.eq_ignore_ascii_case("write") {
            Ok(AccessMode::Write)
        } else {
            Err(DomainError::UnknownMode(s.to_string()))
        }
    }
}

/// Canonical authorization key: `home/{homeId}` or `home/{homeId}/item/{itemId}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AccessItem {
    key: String,
    home_len: usize,
}

impl AccessItem {
    pub fn home(home_id: &str) -> Result<Self, DomainError> {
        access_item_for(home_id, None)
    }

    pub fn item(home_id: &str, item_id: &str) -> Result<Self, DomainError> {
        access_item_for(home_id, Some(item_id))
    }

    pub fn parse(key: &str) -> Result<Self, DomainError> {
        let malformed = || DomainError::MalformedAccessItem(key.to_string());
        let rest = key.strip_prefix("home/").ok_or_else(malformed)?;
        let (home_id, item_part) = match rest.find('/') {
            Some(i) => (&rest[..i], Some(&rest[i..])),
            None => (rest, None),
        };
        match item_part {
            None => Self::home(home_id).map_err(|_| malformed()),
            Some(tail) => {
                let item_id = tail.strip_prefix("/item/").ok_or_else(malformed)?;
                Self::item(home_id, item_id).map_err(|_| malformed())
            }
        }
    }

    pub fn as_str(&self) -> &str {
        &self.key
    }

    pub fn home_id(&self) -> &str {
        &self.key["home/".len().."home/".len() + self.home_len]
    }

    pub fn item_id(&self) -> Option<&str> {
        let start = "home/".len() + self.home_len + "/item/".len();
        (self.key.len() > start).then(|| &self.key[start..])
    }

    pub fn is_home(&self) -> bool {
        self.item_id().is_none()
    }

    /// The home-level key enclosing this item (itself for a home key).
    pub fn enclosing_home(&self) -> AccessItem {
        AccessItem {
            key: format!("home/{}", self.home_id()),
            home_len: self.home_len,
        }
    }
}

impl fmt::Display for AccessItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key)
    }
}

impl FromStr for AccessItem {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AccessItem::parse(s)
    }
}

impl TryFrom<String> for AccessItem {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        AccessItem::parse(&value)
    }
}

impl From<AccessItem> for String {
    fn from(item: AccessItem) -> Self {
        item.key
    }
}

/// Returns the current state: the one with the highest timestamp, ties going
/// to the highest ingestion sequence number.
pub fn current_state(states: &[DeviceState]) -> Option<&DeviceState> {
    states.iter().max_by_key(|s| (s.timestamp, s.seq))
}

/// Home identifiers: non-empty, `[a-zA-Z0-9_-]`.
pub fn is_valid_home_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= MAX_ID_BYTES
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// Item identifiers: non-empty, `[a-zA-Z0-9_/-]`, with no empty path segment.
pub fn is_valid_item_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= MAX_ID_BYTES
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'/')
        && id.split('/').all(|seg| !seg.is_empty())
}

pub fn access_item_for(home_id: &str, item_id: Option<&str>) -> Result<AccessItem, DomainError> {
    if !is_valid_home_id(home_id) {
        return Err(DomainError::MalformedIdentifier(home_id.to_string()));
    }
    let key = match item_id {
        None => format!("home/{home_id}"),
        Some(item) if is_valid_item_id(item) => format!("home/{home_id}/item/{item}"),
        Some(item) => return Err(DomainError::MalformedIdentifier(item.to_string())),
    };
    Ok(AccessItem {
        key,
        home_len: home_id.len(),
    })
}

/// Checks `value` against the grammar of `kind`. Never panics.
pub fn validate_value(kind: ItemKind, value: &str) -> bool {
    match kind {
        ItemKind::Switch => value == "ON" || value == "OFF",
        ItemKind::Dimmer => {
            (1..=3).contains(&value.len())
                && value.bytes().all(|b| b.is_ascii_digit())
                && (value.len() == 1 || !value.starts_with('0'))
                && value.parse::<u32>().is_ok_and(|v| v <= 100)
        }
        ItemKind::Color => parse_hsv(value).is_some(),
        ItemKind::Temperature => {
            parse_decimal(value, true).is_some_and(|t| (-50.0..=150.0).contains(&t))
        }
        ItemKind::Text => value.len() <= MAX_TEXT_BYTES,
    }
}

/// Parses an HSV triple `(h,s,v)` with h in [0,360) and s, v in [0,1].
pub fn parse_hsv(value: &str) -> Option<(f64, f64, f64)> {
    let inner = value.strip_prefix('(')?.strip_suffix(')')?;
    let mut parts = inner.split(',');
    let h = parse_decimal(parts.next()?, false)?;
    let s = parse_decimal(parts.next()?, false)?;
    let v = parse_decimal(parts.next()?, false)?;
    if parts.next().is_some() {
        return None;
    }
    let unit = 0.0..=1.0;
    ((0.0..360.0).contains(&h) && unit.contains(&s) && unit.contains(&v)).then_some((h, s, v))
}

/// Plain decimal: optional '-', digits, optional '.' followed by digits.
/// No exponent, no locale separators, no surrounding whitespace.
pub fn parse_decimal(text: &str, allow_sign: bool) -> Option<f64> {
    let unsigned = match text.strip_prefix('-') {
        Some(rest) if allow_sign => rest,
        Some(_) => return None,
        None => text,
    };
    let (int_part, frac_part) = match unsigned.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (unsigned, None),
    };
    let digits = |s: &str| !s.is_empty() && s.len() <= 32 && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(int_part) || frac_part.is_some_and(|f| !digits(f)) {
        return None;
    }
    text.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(timestamp: u64, value: &str, seq: u64) -> DeviceState {
        DeviceState {
            timestamp,
            value: value.into(),
            seq,
        }
    }

    #[test]
    fn current_state_of_empty_history_is_absent() {
        assert!(current_state(&[]).is_none());
    }

    #[test]
    fn current_state_takes_highest_timestamp() {
        let states = [st(5, "OFF", 1), st(9, "ON", 2)];
        assert_eq!(current_state(&states).unwrap().value, "ON");
    }

    #[test]
    fn current_state_tie_goes_to_last_received() {
        // Replay oracle: re-ingest in arrival order and keep the last state seen
        // at the maximal timestamp.
        let states = [st(7, "A", 1), st(7, "B", 2)];
        let mut replayed: Option<&DeviceState> = None;
        for s in &states {
            if replayed.is_none_or(|r| s.timestamp >= r.timestamp) {
                replayed = Some(s);
            }
        }
        let got = current_state(&states).unwrap();
        assert_eq!(got, replayed.unwrap());
        assert_eq!((got.timestamp, got.value.as_str()), (7, "B"));
    }

    #[test]
    fn value_grammars() {
        assert!(validate_value(ItemKind::Color, "(210,0.25,1)"));
        assert!(validate_value(ItemKind::Switch, "ON"));
        assert!(validate_value(ItemKind::Switch, "OFF"));
        assert!(!validate_value(ItemKind::Switch, "on"));
        assert!(!validate_value(ItemKind::Dimmer, "150"));
        assert!(validate_value(ItemKind::Dimmer, "0"));
        assert!(validate_value(ItemKind::Dimmer, "100"));
        assert!(!validate_value(ItemKind::Dimmer, "abc"));
        assert!(!validate_value(ItemKind::Dimmer, "-1"));
        assert!(!validate_value(ItemKind::Dimmer, "050"));
        assert!(!validate_value(ItemKind::Color, "(360,0.5,0.5)"));
        assert!(!validate_value(ItemKind::Color, "(10,1.5,0.5)"));
        assert!(!validate_value(ItemKind::Color, "(10,0,5,0.5)"));
        assert!(!validate_value(ItemKind::Color, "(210, 0.25, 1)"));
        assert!(validate_value(ItemKind::Temperature, "23.0"));
        assert!(validate_value(ItemKind::Temperature, "-50"));
        assert!(validate_value(ItemKind::Temperature, "150.0"));
        assert!(!validate_value(ItemKind::Temperature, "150.1"));
        assert!(!validate_value(ItemKind::Temperature, "1e2"));
        assert!(!validate_value(ItemKind::Temperature, "23,5"));
        assert!(validate_value(ItemKind::Text, ""));
        assert!(validate_value(ItemKind::Text, &"x".repeat(1024)));
        assert!(!validate_value(ItemKind::Text, &"x".repeat(1025)));
    }

    #[test]
    fn access_item_shapes() {
        assert_eq!(access_item_for("h1", None).unwrap().as_str(), "home/h1");
        let item = access_item_for("h1", Some("ParlorLight_Color")).unwrap();
        assert_eq!(item.as_str(), "home/h1/item/ParlorLight_Color");
        assert_eq!(item.home_id(), "h1");
        assert_eq!(item.item_id(), Some("ParlorLight_Color"));
        assert_eq!(item.enclosing_home().as_str(), "home/h1");
        assert!(matches!(
            access_item_for("h/1", None),
            Err(DomainError::MalformedIdentifier(_))
        ));
        assert!(access_item_for("", None).is_err());
        assert!(access_item_for("h1", Some("a b")).is_err());
        assert!(access_item_for("h1", Some("a//b")).is_err());
    }

    #[test]
    fn access_item_parse_round_trips() {
        for key in ["home/h1", "home/h1/item/lamp", "home/h-2/item/kitchen/light"] {
            let parsed = AccessItem::parse(key).unwrap();
            assert_eq!(parsed.as_str(), key);
        }
        for bad in ["home/", "home/h1/", "home/h1/lamp", "house/h1", "home/h1/item/", "home/h1/item"] {
            assert!(AccessItem::parse(bad).is_err(), "{bad}");
        }
        let json = serde_json::to_string(&AccessItem::parse("home/h1/item/x").unwrap()).unwrap();
        assert_eq!(json, "\"home/h1/item/x\"");
    }

    #[test]
    fn command_json_uses_camel_case_fields() {
        let cmd = Command {
            command_id: "c1".into(),
            home_id: "h1".into(),
            item_id: "lamp".into(),
            value: "OFF".into(),
            label: Some("switch off parlor light".into()),
            issued_by: "mia".into(),
            issued_at: 10,
        };
        let v = serde_json::to_value(&cmd).unwrap();
        for field in ["commandId", "homeId", "itemId", "value", "label", "issuedBy", "issuedAt"] {
            assert!(v.get(field).is_some(), "{field}");
        }
    }
}
