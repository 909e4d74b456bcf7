use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rca_core::{AccessItem, AccessMode, Command, ManualClock, Principal, Role};
use rca_services::access::GrantStore;
use rca_services::access_client::AccessSource;
use rca_services::control::{Catalog, CommandLog, ControlState, SpySink};
use rca_services::history::{HistoryState, Ingestor, StateStore, Telemetry};
use rca_services::http::{Auth, Authenticated};

const USERS: [&str; 3] = ["mia", "carla", "tom"];
const HOMES: [&str; 2] = ["h1", "h2"];
const ITEMS: [(&str, &str, &str); 3] = [("lamp", "Switch", "ON"), ("dim", "Dimmer", "40"), ("temp", "Temperature", "21.5")];

fn caller(user: &str) -> Authenticated {
    Authenticated {
        principal: Principal { subject: user.into(), roles: [Role::Caregiver].into(), token_id: "t".into() },
        token: String::new(),
    }
}

fn seeded_store() -> Arc<StateStore> {
    let store = Arc::new(StateStore::new(100));
    for home in HOMES {
        for (item, kind, value) in ITEMS {
            let t = Telemetry { value: value.into(), timestamp: 1, kind: Some(kind.parse().unwrap()) };
            store.accept(home, item, t).unwrap();
        }
    }
    store
}

fn arb_item() -> impl Strategy<Value = AccessItem> {
    (prop::sample::select(HOMES.to_vec()), prop::option::of(prop::sample::select(ITEMS.iter().map(|i| i.0).collect::<Vec<_>>())))
        .prop_map(|(h, i)| match i {
            Some(i) => AccessItem::item(h, i).unwrap(),
            None => AccessItem::home(h).unwrap(),
        })
}

fn arb_mode() -> impl Strategy<Value = AccessMode> {
    prop::sample::select(vec![AccessMode::Read, AccessMode::Write])
}

type GrantSet = Vec<(String, AccessItem, AccessMode)>;

fn arb_grants() -> impl Strategy<Value = GrantSet> {
    prop::collection::vec((prop::sample::select(USERS.to_vec()).prop_map(String::from), arb_item(), arb_mode()), 0..10)
}

/// Brute-force scan: a grant on the exact key or on the enclosing home.
fn oracle(grants: &GrantSet, user: &str, item: &AccessItem, mode: AccessMode) -> bool {
    grants
        .iter()
        .any(|(u, i, m)| u == user && *m == mode && (i == item || *i == item.enclosing_home()))
}

fn grant_store(grants: &GrantSet) -> (tempfile::TempDir, Arc<GrantStore>) {
    let dir = tempfile::tempdir().unwrap();
    let store = GrantStore::open(dir.path().join("grants.jsonl")).unwrap();
    for (u, i, m) in grants {
        store.grant(u, i.clone(), *m, "admin", 0).unwrap();
    }
    (dir, Arc::new(store))
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn denied_commands_never_reach_the_broker(
        grants in arb_grants(),
        requests in prop::collection::vec((prop::sample::select(USERS.to_vec()), prop::sample::select(HOMES.to_vec()), 0usize..3), 1..20),
    ) {
        let (_dir, store) = grant_store(&grants);
        let spy = Arc::new(SpySink::default());
        let clock = ManualClock::new(5_000);
        let state = ControlState {
            catalog: Catalog::Local(seeded_store()),
            access: AccessSource::Local(store),
            sink: spy.clone(),
            log: Arc::new(CommandLog::in_memory()),
            auth: Auth::new("s", clock.shared()),
        };
        runtime().block_on(async {
            for (user, home, item_ix) in requests {
                let (item, _, value) = ITEMS[item_ix];
                let before = spy.count();
                let key = AccessItem::item(home, item).unwrap();
                let allowed = oracle(&grants, user, &key, AccessMode::Write);
                let result = state.send_command(&caller(user), home, item, value.into(), None).await;
                match result {
                    Ok(d) => {
                        prop_assert!(allowed, "{user} {key} dispatched without a Write grant");
                        prop_assert_eq!(spy.count(), before + 1);
                        let (topic, payload) = spy.published().pop().unwrap();
                        prop_assert_eq!(topic, format!("rca/command/{home}"));
                        let cmd: Command = serde_json::from_slice(&payload).unwrap();
                        prop_assert_eq!(&cmd.command_id, &d.command_id);
                        prop_assert_eq!((cmd.home_id.as_str(), cmd.item_id.as_str(), cmd.value.as_str()), (home, item, value));
                        prop_assert_eq!(cmd.issued_by.as_str(), user);
                    }
                    Err(e) => {
                        prop_assert!(!allowed, "{user} {key} denied despite grant: {:?}", e);
                        prop_assert_eq!(e.code, "forbidden");
                        prop_assert_eq!(spy.count(), before, "denied request published");
                    }
                }
            }
            Ok(())
        })?;
    }

    #[test]
    fn history_views_never_leak_denied_items(grants in arb_grants(), user in prop::sample::select(USERS.to_vec())) {
        let (_dir, store) = grant_store(&grants);
        let clock = ManualClock::new(0);
        let state = HistoryState {
            ingestor: Arc::new(Ingestor::new(seeded_store(), None, clock.shared())),
            access: AccessSource::Local(store),
            auth: Auth::new("s", clock.shared()),
        };
        runtime().block_on(async {
            let who = caller(user);
            let mut expected_homes = BTreeSet::new();
            for home in HOMES {
                let home_read = oracle(&grants, user, &AccessItem::home(home).unwrap(), AccessMode::Read);
                // Item-level visibility alone, ignoring the home grant.
                let item_read: BTreeSet<&str> = ITEMS
                    .iter()
                    .map(|i| i.0)
                    .filter(|i| grants.iter().any(|(u, k, m)| u == user && *m == AccessMode::Read && *k == AccessItem::item(home, i).unwrap()))
                    .collect();
                let expected: Option<BTreeSet<&str>> = if home_read {
                    Some(ITEMS.iter().map(|i| i.0).collect())
                } else if !item_read.is_empty() {
                    Some(item_read)
                } else {
                    None
                };
                match (state.get_home(&who, home).await, &expected) {
                    (Ok(view), Some(items)) => {
                        let got: BTreeSet<&str> = view.items.iter().map(|i| i.item_id.as_str()).collect();
                        prop_assert_eq!(&got, items);
                        for i in &view.items {
                            prop_assert!(oracle(&grants, user, &AccessItem::item(home, &i.item_id).unwrap(), AccessMode::Read));
                        }
                    }
                    (Err(e), None) => prop_assert_eq!(e.code, "forbidden"),
                    (got, want) => prop_assert!(false, "home {home}: got {:?}, want {:?}", got.map(|v| v.items.len()), want),
                }
                if expected.is_some() {
                    expected_homes.insert(home.to_string());
                }
            }
            let listed: BTreeSet<String> = state.list_homes(&who).await.unwrap().into_iter().map(|h| h.home_id).collect();
            prop_assert_eq!(listed, expected_homes);
            Ok(())
        })?;
    }
}

#[tokio::test]
async fn value_validation_precedes_the_access_check() {
    // No grants at all: an access check would answer forbidden.
    let (_dir, store) = grant_store(&Vec::new());
    let spy = Arc::new(SpySink::default());
    let state = ControlState {
        catalog: Catalog::Local(seeded_store()),
        access: AccessSource::Local(store),
        sink: spy.clone(),
        log: Arc::new(CommandLog::in_memory()),
        auth: Auth::new("s", ManualClock::new(0).shared()),
    };
    let err = state.send_command(&caller("mia"), "h1", "dim", "150".into(), None).await.unwrap_err();
    assert_eq!(err.code, "invalid-value");
    let err = state.send_command(&caller("mia"), "h1", "nope", "1".into(), None).await.unwrap_err();
    assert_eq!(err.code, "unknown-item");
    let err = state.send_command(&caller("mia"), "h1", "dim", "50".into(), None).await.unwrap_err();
    assert_eq!(err.code, "forbidden");
    assert_eq!(spy.count(), 0);
}

#[tokio::test]
async fn command_log_requires_home_read_and_is_newest_first() {
    let grants: GrantSet = vec![
        ("mia".into(), AccessItem::home("h1").unwrap(), AccessMode::Write),
        ("mia".into(), AccessItem::home("h1").unwrap(), AccessMode::Read),
        ("tom".into(), AccessItem::home("h1").unwrap(), AccessMode::Write),
    ];
    let (_dir, store) = grant_store(&grants);
    let clock = ManualClock::new(0);
    let state = ControlState {
        catalog: Catalog::Local(seeded_store()),
        access: AccessSource::Local(store),
        sink: Arc::new(SpySink::default()),
        log: Arc::new(CommandLog::in_memory()),
        auth: Auth::new("s", clock.shared()),
    };
    let mut ids = Vec::new();
    for v in ["ON", "OFF", "ON"] {
        clock.advance(1);
        ids.push(state.send_command(&caller("mia"), "h1", "lamp", v.into(), None).await.unwrap().command_id);
    }
    let log = state.command_log(&caller("mia"), "h1", 10).await.unwrap();
    let got: Vec<String> = log.iter().map(|c| c.command_id.clone()).collect();
    ids.reverse();
    assert_eq!(got, ids);
    assert_eq!(state.command_log(&caller("mia"), "h1", 1).await.unwrap().len(), 1);
    assert_eq!(state.command_log(&caller("tom"), "h1", 10).await.unwrap_err().code, "forbidden");
    assert_eq!(state.command_log(&caller("mia"), "h1", 501).await.unwrap_err().code, "invalid-limit");
}
