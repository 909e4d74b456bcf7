//! Value generators: `toggle`, `ramp(min,max,step)`, `randomwalk(min,max,stddev)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rca_core::domain::{parse_decimal, parse_hsv};
use rca_core::ItemKind;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeneratorSpec {
    Toggle,
    /// Sawtooth: adds `step` each tick and wraps to `min` past `max`.
    Ramp { min: f64, max: f64, step: f64 },
    /// Gaussian steps, reflected back into `[min, max]`.
    RandomWalk { min: f64, max: f64, stddev: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeneratorError {
    #[error("unknown generator {0:?}")]
    Unknown(String),
    #[error("generator {0:?}: expected {1} numeric arguments")]
    Arity(String, usize),
    #[error("generator {0:?}: {1}")]
    Range(String, &'static str),
    #[error("generator {spec} cannot drive a {kind} item")]
    Kind { spec: String, kind: ItemKind },
}

impl FromStr for GeneratorSpec {
    type Err = GeneratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let text = s.trim();
        if text == "toggle" {
            return Ok(GeneratorSpec::Toggle);
        }
        let (name, rest) = text.split_once('(').ok_or_else(|| GeneratorError::Unknown(s.into()))?;
        let args = rest.strip_suffix(')').ok_or_else(|| GeneratorError::Unknown(s.into()))?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|a| a.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| GeneratorError::Arity(s.into(), 3))?;
        let [a, b, c] = nums[..] else {
            return Err(GeneratorError::Arity(s.into(), 3));
        };
        if !(a.is_finite() && b.is_finite() && c.is_finite()) {
            return Err(GeneratorError::Range(s.into(), "arguments must be finite"));
        }
        if a >= b {
            return Err(GeneratorError::Range(s.into(), "min must be below max"));
        }
        match name.trim() {
            "ramp" if c > 0.0 => Ok(GeneratorSpec::Ramp { min: a, max: b, step: c }),
            "ramp" => Err(GeneratorError::Range(s.into(), "step must be positive")),
            "randomwalk" if c >= 0.0 => Ok(GeneratorSpec::RandomWalk { min: a, max: b, stddev: c }),
            "randomwalk" => Err(GeneratorError::Range(s.into(), "stddev must not be negative")),
            _ => Err(GeneratorError::Unknown(s.into())),
        }
    }
}

impl fmt::Display for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorSpec::Toggle => f.write_str("toggle"),
            GeneratorSpec::Ramp { min, max, step } => write!(f, "ramp({min},{max},{step})"),
            GeneratorSpec::RandomWalk { min, max, stddev } => write!(f, "randomwalk({min},{max},{stddev})"),
        }
    }
}

impl Serialize for GeneratorSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GeneratorSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Numeric range a kind can represent, if any.
fn kind_range(kind: ItemKind) -> Option<(f64, f64)> {
    match kind {
        ItemKind::Dimmer => Some((0.0, 100.0)),
        ItemKind::Temperature => Some((-50.0, 150.0)),
        ItemKind::Color => Some((0.0, 360.0)),
        ItemKind::Text => Some((f64::MIN, f64::MAX)),
        ItemKind::Switch => None,
    }
}

impl GeneratorSpec {
    /// Rejects combinations that could emit values invalid for `kind`.
    pub fn check_kind(&self, kind: ItemKind) -> Result<(), GeneratorError> {
        let bad = || GeneratorError::Kind { spec: self.to_string(), kind };
        match (self, kind_range(kind)) {
            (GeneratorSpec::Toggle, None) => Ok(()),
            (GeneratorSpec::Toggle, Some(_)) | (_, None) => Err(bad()),
            (GeneratorSpec::Ramp { min, max, .. } | GeneratorSpec::RandomWalk { min, max, .. }, Some((lo, hi))) => {
                if *min >= lo && *max <= hi {
                    Ok(())
                } else {
                    Err(bad())
                }
            }
        }
    }

    /// Produces the next value from the current one.
    pub fn next_value<R: Rng>(&self, kind: ItemKind, current: &str, rng: &mut R) -> String {
        match *self {
            GeneratorSpec::Toggle => if current == "ON" { "OFF" } else { "ON" }.to_string(),
            GeneratorSpec::Ramp { min, max, step } => {
                let x = numeric(kind, current).unwrap_or(min - step) + step;
                let x = if x > max || x < min { min } else { x };
                format_value(kind, x)
            }
            GeneratorSpec::RandomWalk { min, max, stddev } => {
                let start = numeric(kind, current).unwrap_or((min + max) / 2.0).clamp(min, max);
                let delta = if stddev > 0.0 {
                    Normal::new(0.0, stddev).expect("stddev is finite and positive").sample(rng)
                } else {
                    0.0
                };
                format_value(kind, reflect(start + delta, min, max))
            }
        }
    }
}

fn reflect(mut x: f64, min: f64, max: f64) -> f64 {
    let width = max - min;
    // Fold repeatedly; a huge step still lands inside.
    for _ in 0..64 {
        if x > max {
            x = max - (x - max);
        } else if x < min {
            x = min + (min - x);
        } else {
            return x;
        }
    }
    min + (x - min).rem_euclid(width)
}

fn numeric(kind: ItemKind, value: &str) -> Option<f64> {
    match kind {
        ItemKind::Color => parse_hsv(value).map(|(h, _, _)| h),
        ItemKind::Switch => None,
        _ => parse_decimal(value, true),
    }
}

/// Renders `x` in the grammar of `kind`.
pub fn format_value(kind: ItemKind, x: f64) -> String {
    match kind {
        ItemKind::Dimmer => format!("{}", x.round().clamp(0.0, 100.0) as u8),
        ItemKind::Temperature => {
            let t = (x.clamp(-50.0, 150.0) * 10.0).round() / 10.0;
            // Avoid "-0.0".
            format!("{:.1}", if t == 0.0 { 0.0 } else { t })
        }
        ItemKind::Color => {
            let hue = (x.rem_euclid(360.0) * 10.0).floor() / 10.0;
            format!("({hue:.1},1,1)")
        }
        ItemKind::Text => format!("{:.2}", x),
        ItemKind::Switch => if x >= 0.5 { "ON" } else { "OFF" }.to_string(),
    }
}
