use proptest::prelude::*;
use rca_core::{validate_value, Command, ItemKind};
use rca_simulator::{generate_fleet, generate_fleet_with_period, SimEngine, SimScenario};

fn command(home: &str, item: &str, value: &str) -> Command {
    Command {
        command_id: format!("{home}-{item}-{value}"),
        home_id: home.into(),
        item_id: item.into(),
        value: value.into(),
        label: None,
        issued_by: "tester".into(),
        issued_at: 0,
    }
}

/// Publish bytes for a run over a fixed simulated-clock schedule.
fn transcript(scenario: &SimScenario, schedule: &[u64]) -> Vec<(String, Vec<u8>)> {
    let mut engine = SimEngine::new(scenario, 1_000);
    let mut out: Vec<(String, Vec<u8>)> = engine.initial().iter().map(|m| (m.topic(), m.payload())).collect();
    for t in schedule {
        out.extend(engine.advance_to(*t).iter().map(|m| (m.topic(), m.payload())));
    }
    out
}

#[test]
fn fleet_runs_are_byte_identical() {
    let schedule: Vec<u64> = (1..=60).map(|i| 1_000 + i * 500).collect();
    let a = transcript(&generate_fleet(2, 3, 7).unwrap(), &schedule);
    let b = transcript(&generate_fleet(2, 3, 7).unwrap(), &schedule);
    assert!(a.len() > 6 + 2 * 3 * 10);
    assert_eq!(a, b);
    let c = transcript(&generate_fleet(2, 3, 8).unwrap(), &schedule);
    assert_ne!(a, c);
}

#[test]
fn scenario_file_round_trip_preserves_behaviour() {
    let fleet = generate_fleet(3, 5, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fleet.json");
    std::fs::write(&path, fleet.to_json()).unwrap();
    let loaded = SimScenario::load(&path).unwrap();
    let schedule = [5_000, 9_000, 20_000];
    assert_eq!(transcript(&fleet, &schedule), transcript(&loaded, &schedule));
}

#[test]
fn fleet_publish_rate_matches_period() {
    // 10 homes x 5 items every 2 s for 60 s: 29 or 30 ticks each, by phase.
    let scenario = generate_fleet(10, 5, 3).unwrap();
    let mut engine = SimEngine::new(&scenario, 0);
    let ticks = engine.advance_to(60_000);
    let expected: u64 = scenario.behaviors.iter().map(|b| (60_000 - b.offset_ms) / b.period_ms).sum();
    assert_eq!(ticks.len() as u64, expected);
    assert!((10 * 5 * 29..=10 * 5 * 30).contains(&ticks.len()));
    assert!(ticks.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    for t in &ticks {
        let kind = scenario.homes.iter().flat_map(|h| &h.items).find(|i| i.item_id == t.item_id).unwrap().kind;
        assert!(validate_value(kind, &t.value), "{t:?}");
    }
}

fn arb_value(kind: ItemKind) -> BoxedStrategy<String> {
    match kind {
        ItemKind::Switch => prop::sample::select(vec!["ON", "OFF", "on", "maybe"]).prop_map(String::from).boxed(),
        ItemKind::Dimmer => prop_oneof![(0..=120u32).prop_map(|v| v.to_string()), Just("abc".to_string())].boxed(),
        ItemKind::Color => prop_oneof![(0..400u32).prop_map(|h| format!("({h},0.5,1)")), Just("red".to_string())].boxed(),
        ItemKind::Temperature => (-600..1600i32).prop_map(|t| format!("{:.1}", t as f64 / 10.0)).boxed(),
        ItemKind::Text => "[a-z]{0,8}".boxed(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// With no behaviour on the item, the last state published after a
    /// valid command is the commanded value; invalid ones change nothing.
    #[test]
    fn commands_converge(
        (home, item, seed, values) in (1usize..=3, 0usize..5, any::<u64>())
            .prop_flat_map(|(h, i, seed)| (Just(h), Just(i), Just(seed), prop::collection::vec(arb_value(ItemKind::ALL[i]), 1..10)))
    ) {
        let mut scenario = generate_fleet_with_period(3, 5, seed, 1_000).unwrap();
        let home_id = format!("h{home:04}");
        let target = scenario.homes[home - 1].items[item].clone();
        prop_assert_eq!(target.kind, ItemKind::ALL[item]);
        scenario.behaviors.retain(|b| !(b.home_id == home_id && b.item_id == target.item_id));
        let mut engine = SimEngine::new(&scenario, 0);
        let mut expected = target.initial_value.clone();
        let mut now = 0;
        for value in values {
            now += 250;
            let ticks = engine.advance_to(now);
            prop_assert!(ticks.iter().all(|t| !(t.home_id == home_id && t.item_id == target.item_id)));
            match engine.command(&command(&home_id, &target.item_id, &value), now) {
                Ok(msg) => {
                    prop_assert!(validate_value(target.kind, &value));
                    prop_assert_eq!(&msg.value, &value);
                    prop_assert_eq!(msg.timestamp, now);
                    expected = value;
                }
                Err(_) => prop_assert!(!validate_value(target.kind, &value)),
            }
            prop_assert_eq!(engine.home(&home_id).unwrap().value(&target.item_id), Some(expected.as_str()));
        }
    }

    /// Commands addressed to one home never change another.
    #[test]
    fn homes_are_isolated(cmds in prop::collection::vec((1usize..=4, 0usize..5, 0..=100u32), 1..40)) {
        let scenario = generate_fleet(4, 5, 5).unwrap();
        let mut engine = SimEngine::new(&scenario, 0);
        let snapshot = |e: &SimEngine| -> Vec<Vec<(String, String)>> {
            e.homes().iter().map(|h| h.values().map(|(k, v)| (k.to_string(), v.to_string())).collect()).collect()
        };
        for (home, item, v) in cmds {
            let before = snapshot(&engine);
            let target = &scenario.homes[home - 1].items[item];
            let value = match target.kind {
                ItemKind::Switch => if v % 2 == 0 { "ON".to_string() } else { "OFF".to_string() },
                ItemKind::Color => format!("({},1,1)", v * 3),
                _ => v.to_string(),
            };
            let _ = engine.command(&command(&format!("h{home:04}"), &target.item_id, &value), 1);
            let after = snapshot(&engine);
            for (i, (b, a)) in before.iter().zip(&after).enumerate() {
                if i != home - 1 {
                    prop_assert_eq!(b, a, "home {} changed by a command for home {}", i + 1, home);
                }
            }
        }
    }
}
