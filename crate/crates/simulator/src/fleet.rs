//! Synthetic fleets for load tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rca_core::ItemKind;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::generator::{format_value, GeneratorSpec};
use crate::scenario::{Behavior, SimHome, SimItem, SimScenario};

pub const DEFAULT_PERIOD_MS: u64 = 2_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FleetError {
    #[error("a fleet needs at least one home")]
    NoHomes,
    #[error("a fleet needs at least one item per home")]
    NoItems,
    #[error("at most 9999 homes")]
    TooManyHomes,
}

/// Stable 64-bit seed for one (fleet seed, home, item) triple.
pub fn derive_seed(seed: u64, home_id: &str, item_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(home_id.as_bytes());
    h.update([0]);
    h.update(item_id.as_bytes());
    u64::from_be_bytes(h.finalize()[..8].try_into().expect("digest is 32 bytes"))
}

fn behavior_for(kind: ItemKind) -> GeneratorSpec {
    match kind {
        ItemKind::Switch => GeneratorSpec::Toggle,
        ItemKind::Dimmer => GeneratorSpec::Ramp { min: 0.0, max: 100.0, step: 5.0 },
        ItemKind::Color => GeneratorSpec::Ramp { min: 0.0, max: 359.0, step: 15.0 },
        ItemKind::Temperature => GeneratorSpec::RandomWalk { min: 16.0, max: 26.0, stddev: 0.3 },
        ItemKind::Text => GeneratorSpec::RandomWalk { min: 0.0, max: 1000.0, stddev: 25.0 },
    }
}

pub fn generate_fleet(n_homes: usize, items_per_home: usize, seed: u64) -> Result<SimScenario, FleetError> {
    generate_fleet_with_period(n_homes, items_per_home, seed, DEFAULT_PERIOD_MS)
}

/// Homes `h0001`.., items cycling through the five kinds, one behaviour per
/// item ticking every `period_ms` with a seeded phase offset.
pub fn generate_fleet_with_period(
    n_homes: usize,
    items_per_home: usize,
    seed: u64,
    period_ms: u64,
) -> Result<SimScenario, FleetError> {
    if n_homes == 0 {
        return Err(FleetError::NoHomes);
    }
    if items_per_home == 0 {
        return Err(FleetError::NoItems);
    }
    if n_homes > 9999 {
        return Err(FleetError::TooManyHomes);
    }
    let period_ms = period_ms.max(1);
    let mut homes = Vec::with_capacity(n_homes);
    let mut behaviors = Vec::with_capacity(n_homes * items_per_home);
    for h in 1..=n_homes {
        let home_id = format!("h{h:04}");
        let mut items = Vec::with_capacity(items_per_home);
        for i in 0..items_per_home {
            let kind = ItemKind::ALL[i % ItemKind::ALL.len()];
            let item_id = format!("{}{}", kind.as_str().to_ascii_lowercase(), i + 1);
            let item_seed = derive_seed(seed, &home_id, &item_id);
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
            let generator = behavior_for(kind);
            let initial_value = match generator {
                GeneratorSpec::Toggle => if rng.gen_bool(0.5) { "ON" } else { "OFF" }.to_string(),
                GeneratorSpec::Ramp { min, max, .. } | GeneratorSpec::RandomWalk { min, max, .. } => {
                    format_value(kind, rng.gen_range(min..max))
                }
            };
            behaviors.push(Behavior {
                home_id: home_id.clone(),
                item_id: item_id.clone(),
                period_ms,
                generator,
                seed: item_seed,
                offset_ms: rng.gen_range(0..period_ms),
            });
            items.push(SimItem { item_id, kind, initial_value });
        }
        homes.push(SimHome { home_id, items, command_delay_ms: 0 });
    }
    Ok(SimScenario { homes, behaviors })
}
