use std::collections::HashSet;

use proptest::prelude::*;
use rca_core::resilience::{BreakerConfig, BreakerState, CircuitBreaker, Outcome};
use rca_core::{access_item_for, current_state, validate_value, Claims, DeviceState, ItemKind, ManualClock, Role, TokenSigner};

fn arb_kind() -> impl Strategy<Value = ItemKind> {
    prop::sample::select(ItemKind::ALL.to_vec())
}

/// Brute force: sort by (timestamp, seq) and take the last element.
fn latest_by_sort(states: &[DeviceState]) -> Option<DeviceState> {
    let mut sorted = states.to_vec();
    sorted.sort_by_key(|s| (s.timestamp, s.seq));
    sorted.pop()
}

proptest! {
    #[test]
    fn current_state_matches_sort_oracle(timestamps in prop::collection::vec(0u64..20, 1..60)) {
        let states: Vec<DeviceState> = timestamps
            .iter()
            .enumerate()
            .map(|(i, &t)| DeviceState { timestamp: t, value: format!("v{i}"), seq: i as u64 + 1 })
            .collect();
        prop_assert_eq!(current_state(&states).cloned(), latest_by_sort(&states));
    }

    #[test]
    fn validate_value_is_total(kind in arb_kind(), bytes in prop::collection::vec(any::<u8>(), 0..2048)) {
        let text = String::from_utf8_lossy(&bytes);
        let _ = validate_value(kind, &text);
    }

    #[test]
    fn validate_value_total_on_grammar_like_input(kind in arb_kind(), s in "[-(),.0-9ONF ]{0,24}") {
        let _ = validate_value(kind, &s);
    }

    #[test]
    fn color_triples_in_range_validate(h in 0u32..360, s in 0u32..=100, v in 0u32..=100) {
        let value = format!("({h},{}.{:02},{})", s / 100, s % 100, v / 100);
        prop_assert!(validate_value(ItemKind::Color, &value), "{}", value);
    }

    #[test]
    fn access_item_for_is_injective(
        a in ("[a-zA-Z0-9_-]{1,6}", prop::option::of("[a-z0-9_-]{1,4}(/[a-z0-9_-]{1,4}){0,2}")),
        b in ("[a-zA-Z0-9_-]{1,6}", prop::option::of("[a-z0-9_-]{1,4}(/[a-z0-9_-]{1,4}){0,2}")),
    ) {
        let ka = access_item_for(&a.0, a.1.as_deref()).unwrap();
        let kb = access_item_for(&b.0, b.1.as_deref()).unwrap();
        prop_assert_eq!(ka == kb, a == b);
        prop_assert_eq!(ka.home_id(), a.0.as_str());
        prop_assert_eq!(ka.item_id(), a.1.as_deref());
    }

    #[test]
    fn token_single_byte_mutation_fails(pos in any::<prop::sample::Index>(), replacement in prop::sample::select(
        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_.".chars().collect::<Vec<_>>()
    )) {
        let signer = TokenSigner::new("shared-secret");
        let token = signer.sign(&Claims {
            sub: "mia".into(),
            roles: [Role::Caregiver].into(),
            iat: 1_000,
            exp: 10_000,
            jti: "abc".into(),
        });
        let i = pos.index(token.len());
        let mut bytes = token.clone().into_bytes();
        prop_assume!(bytes[i] != replacement as u8);
        bytes[i] = replacement as u8;
        let mutated = String::from_utf8(bytes).unwrap();
        prop_assert!(signer.verify(&mutated, 2_000).is_err());
    }
}

#[test]
fn issued_tokens_validate_to_their_subject_across_relays() {
    let signer = TokenSigner::new("shared-secret");
    let token = signer.sign(&Claims {
        sub: "carla".into(),
        roles: [Role::Relative].into(),
        iat: 0,
        exp: 60_000,
        jti: "t".into(),
    });
    // Each hop holds its own verifier built from the same shared secret.
    let hops: Vec<TokenSigner> = (0..5).map(|_| TokenSigner::new("shared-secret")).collect();
    let subjects: HashSet<String> = hops
        .iter()
        .map(|h| h.principal(&token, 1_000).unwrap().subject)
        .collect();
    assert_eq!(subjects, HashSet::from(["carla".to_string()]));
}

// Reference breaker: an explicit transition table over observable states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RefState {
    Closed(u32),
    Open(u64),
    HalfOpen,
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Success,
    Failure,
    Tick(u64),
}

struct RefMachine {
    state: RefState,
    now: u64,
    threshold: u32,
    reset: u64,
}

impl RefMachine {
    fn observe(&self) -> RefState {
        match self.state {
            RefState::Open(at) if self.now - at >= self.reset => RefState::HalfOpen,
            s => s,
        }
    }

    fn apply(&mut self, event: Event) {
        let current = self.observe();
        self.state = match (current, event) {
            (_, Event::Tick(dt)) => {
                self.now += dt;
                current
            }
            (RefState::Closed(_), Event::Success) => RefState::Closed(0),
            (RefState::Closed(n), Event::Failure) if n + 1 >= self.threshold => RefState::Open(self.now),
            (RefState::Closed(n), Event::Failure) => RefState::Closed(n + 1),
            (RefState::Open(at), Event::Success | Event::Failure) => RefState::Open(at),
            (RefState::HalfOpen, Event::Success) => RefState::Closed(0),
            (RefState::HalfOpen, Event::Failure) => RefState::Open(self.now),
        };
    }
}

fn to_ref(state: BreakerState) -> RefState {
    match state {
        BreakerState::Closed { consecutive_failures } => RefState::Closed(consecutive_failures),
        BreakerState::Open { opened_at } => RefState::Open(opened_at),
        BreakerState::HalfOpen { trial_in_flight: false } => RefState::HalfOpen,
        BreakerState::HalfOpen { trial_in_flight: true } => panic!("trial left in flight"),
    }
}

fn arb_event() -> impl Strategy<Value = Event> {
    prop_oneof![
        4 => Just(Event::Success),
        5 => Just(Event::Failure),
        2 => (0u64..6_000).prop_map(Event::Tick),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn breaker_matches_reference_machine(events in prop::collection::vec(arb_event(), 1..80)) {
        let config = BreakerConfig::default();
        let clock = ManualClock::new(0);
        let breaker = CircuitBreaker::new("a->b", config, clock.shared());
        let mut reference = RefMachine {
            state: RefState::Closed(0),
            now: 0,
            threshold: config.failure_threshold,
            reset: config.reset_timeout_ms,
        };
        for event in events {
            let open_before = matches!(reference.observe(), RefState::Open(_));
            match event {
                Event::Tick(dt) => clock.advance(dt),
                Event::Success | Event::Failure => {
                    if let Ok(permit) = breaker.try_acquire() {
                        prop_assert!(!open_before, "call admitted while open");
                        permit.record(if matches!(event, Event::Success) { Outcome::Success } else { Outcome::Failure });
                    }
                }
            }
            reference.apply(event);
            prop_assert_eq!(to_ref(breaker.state()), reference.observe());
        }
    }
}
