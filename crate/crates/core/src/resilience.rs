//! Client-side round-robin balancing and per-target circuit breaking.
//!
//! ```text
//! Closed(n) --failure, n+1 == threshold--> Open(at)
//! Open(at)  --reset timeout elapsed------> HalfOpen (one trial admitted)
//! HalfOpen  --trial success--------------> Closed(0)
//! HalfOpen  --trial failure--------------> Open(now)
//! ```

use std::collections::HashMap;
use std::future::Future;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BreakerConfig {
    pub failure_threshold: u32,
    pub reset_timeout_ms: u64,
    pub call_timeout_ms: u64,
}

impl Default for BreakerConfig {
    fn default() -> Self {
        Self {
            failure_threshold: 5,
            reset_timeout_ms: 10_000,
            call_timeout_ms: 2_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "camelCase")]
pub enum BreakerState {
    Closed { consecutive_failures: u32 },
    Open { opened_at: u64 },
    HalfOpen { trial_in_flight: bool },
}

impl BreakerState {
    pub fn name(&self) -> &'static str {
        match self {
            BreakerState::Closed { .. } => "closed",
            BreakerState::Open { .. } => "open",
            BreakerState::HalfOpen { .. } => "half-open",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("circuit breaker open")]
pub struct BreakerOpen;

#[derive(Debug, Error)]
pub enum CallError<E> {
    #[error("circuit breaker open")]
    BreakerOpen,
    #[error("call timed out")]
    Timeout,
    #[error(transparent)]
    Downstream(E),
}

pub struct CircuitBreaker {
    name: String,
    config: BreakerConfig,
    clock: SharedClock,
    state: Mutex<BreakerState>,
}

impl std::fmt::Debug for CircuitBreaker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CircuitBreaker")
            .field("name", &self.name)
            .field("state", &*self.state.lock())
            .finish()
    }
}

/// Admission ticket for one call. Dropping it unrecorded releases a
/// half-open trial slot without changing the state.
pub struct Permit<'a> {
    breaker: &'a CircuitBreaker,
    trial: bool,
    recorded: bool,
}

impl Permit<'_> {
    pub fn is_trial(&self) -> bool {
        self.trial
    }

    pub fn record(mut self, outcome: Outcome) {
        self.recorded = true;
        self.breaker.on_outcome(self.trial, outcome);
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        if self.trial && !self.recorded {
            let mut state = self.breaker.state.lock();
            if let BreakerState::HalfOpen { trial_in_flight: true } = *state {
                *state = BreakerState::HalfOpen { trial_in_flight: false };
            }
        }
    }
}

impl CircuitBreaker {
    pub fn new(name: impl Into<String>, config: BreakerConfig, clock: SharedClock) -> Self {
        Self {
            name: name.into(),
            config,
            clock,
            state: Mutex::new(BreakerState::Closed { consecutive_failures: 0 }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> BreakerConfig {
        self.config
    }

    fn transition(&self, state: &mut BreakerState, to: BreakerState, at: u64) {
        if state.name() != to.name() {
            tracing::info!(breaker = %self.name, from = state.name(), to = to.name(), at, "breaker transition");
        }
        *state = to;
    }

    fn settle(&self, state: &mut BreakerState, now: u64) {
        if let BreakerState::Open { opened_at } = *state {
            if now.saturating_sub(opened_at) >= self.config.reset_timeout_ms {
                self.transition(state, BreakerState::HalfOpen { trial_in_flight: false }, now);
            }
        }
    }

    /// Current state, with an expired Open reported as HalfOpen.
    pub fn state(&self) -> BreakerState {
        let mut state = self.state.lock();
        self.settle(&mut state, self.clock.now_ms());
        *state
    }

    pub fn try_acquire(&self) -> Result<Permit<'_>, BreakerOpen> {
        let now = self.clock.now_ms();
        let mut state = self.state.lock();
        self.settle(&mut state, now);
        let trial = match *state {
            BreakerState::Closed { .. } => false,
            BreakerState::Open { .. } | BreakerState::HalfOpen { trial_in_flight: true } => {
                return Err(BreakerOpen)
            }
            BreakerState::HalfOpen { trial_in_flight: false } => {
                *state = BreakerState::HalfOpen { trial_in_flight: true };
                true
            }
        };
        Ok(Permit {
            breaker: self,
            trial,
            recorded: false,
        })
    }

    fn on_outcome(&self, trial: bool, outcome: Outcome) {
        let now = self.clock.now_ms();
        let mut state = self.state.lock();
        match (*state, trial, outcome) {
            (BreakerState::Closed { .. }, false, Outcome::Success) => {
                *state = BreakerState::Closed { consecutive_failures: 0 };
            }
            (BreakerState::Closed { consecutive_failures }, false, Outcome::Failure) => {
                let failures = consecutive_failures + 1;
                if failures >= self.config.failure_threshold {
                    self.transition(&mut state, BreakerState::Open { opened_at: now }, now);
                } else {
                    *state = BreakerState::Closed { consecutive_failures: failures };
                }
            }
            (BreakerState::HalfOpen { .. }, true, Outcome::Success) => {
                self.transition(&mut state, BreakerState::Closed { consecutive_failures: 0 }, now);
            }
            (BreakerState::HalfOpen { .. }, true, Outcome::Failure) => {
                self.transition(&mut state, BreakerState::Open { opened_at: now }, now);
            }
            // Late results from calls admitted under an earlier state.
            _ => {}
        }
    }

    /// Runs `call` under the breaker with the configured timeout. `classify`
    /// decides whether a completed call counts as a downstream failure.
    pub async fn call<T, E, F>(
        &self,
        call: F,
        classify: impl FnOnce(&Result<T, E>) -> Outcome,
    ) -> Result<T, CallError<E>>
    where
        F: Future<Output = Result<T, E>>,
    {
        let permit = self.try_acquire().map_err(|_| CallError::BreakerOpen)?;
        let timeout = Duration::from_millis(self.config.call_timeout_ms);
        match tokio::time::timeout(timeout, call).await {
            Err(_) => {
                permit.record(Outcome::Failure);
                Err(CallError::Timeout)
            }
            Ok(result) => {
                permit.record(classify(&result));
                result.map_err(CallError::Downstream)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no live instances")]
pub struct NoInstances;

/// Per-service round-robin cursor.
#[derive(Debug, Default)]
pub struct RoundRobin {
    cursors: Mutex<HashMap<String, u64>>,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn choose<'a, T>(&self, service: &str, instances: &'a [T]) -> Result<&'a T, NoInstances> {
        if instances.is_empty() {
            return Err(NoInstances);
        }
        let mut cursors = self.cursors.lock();
        let counter = cursors.entry(service.to_string()).or_insert(0);
        let chosen = &instances[(*counter % instances.len() as u64) as usize];
        *counter += 1;
        Ok(chosen)
    }

    pub fn counter(&self, service: &str) -> u64 {
        self.cursors.lock().get(service).copied().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn breaker(clock: &ManualClock) -> CircuitBreaker {
        CircuitBreaker::new("history->accesscontrol", BreakerConfig::default(), clock.shared())
    }

    fn attempt(b: &CircuitBreaker, outcome: Outcome) -> bool {
        match b.try_acquire() {
            Ok(p) => {
                p.record(outcome);
                true
            }
            Err(_) => false,
        }
    }

    #[test]
    fn round_robin_cycles() {
        let rr = RoundRobin::new();
        let inst = ["A", "B"];
        let picks: Vec<_> = (0..4).map(|_| *rr.choose("svc", &inst).unwrap()).collect();
        assert_eq!(picks, ["A", "B", "A", "B"]);
        assert!((0..5).all(|_| *rr.choose("one", &["X"]).unwrap() == "X"));
        assert_eq!(rr.choose::<&str>("none", &[]), Err(NoInstances));
    }

    #[test]
    fn opens_after_threshold_and_fails_fast() {
        let clock = ManualClock::new(0);
        let b = breaker(&clock);
        for _ in 0..5 {
            assert!(attempt(&b, Outcome::Failure));
        }
        assert_eq!(b.state(), BreakerState::Open { opened_at: 0 });
        assert!(!attempt(&b, Outcome::Success));
    }

    #[test]
    fn half_open_success_closes() {
        let clock = ManualClock::new(0);
        let b = breaker(&clock);
        for _ in 0..5 {
            attempt(&b, Outcome::Failure);
        }
        clock.advance(10_000);
        assert_eq!(b.state(), BreakerState::HalfOpen { trial_in_flight: false });
        assert!(attempt(&b, Outcome::Success));
        assert_eq!(b.state(), BreakerState::Closed { consecutive_failures: 0 });
    }

    #[test]
    fn half_open_failure_reopens() {
        let clock = ManualClock::new(0);
        let b = breaker(&clock);
        for _ in 0..5 {
            attempt(&b, Outcome::Failure);
        }
        clock.advance(10_500);
        assert!(attempt(&b, Outcome::Failure));
        assert_eq!(b.state(), BreakerState::Open { opened_at: 10_500 });
    }

    #[test]
    fn success_resets_consecutive_count() {
        let clock = ManualClock::new(0);
        let b = breaker(&clock);
        for _ in 0..4 {
            attempt(&b, Outcome::Failure);
        }
        attempt(&b, Outcome::Success);
        for _ in 0..4 {
            attempt(&b, Outcome::Failure);
        }
        assert_eq!(b.state(), BreakerState::Closed { consecutive_failures: 4 });
    }

    #[test]
    fn half_open_admits_one_trial() {
        let clock = ManualClock::new(0);
        let b = breaker(&clock);
        for _ in 0..5 {
            attempt(&b, Outcome::Failure);
        }
        clock.advance(10_000);
        let trial = b.try_acquire().unwrap();
        assert!(trial.is_trial());
        assert!(b.try_acquire().is_err());
        drop(trial);
        assert_eq!(b.state(), BreakerState::HalfOpen { trial_in_flight: false });
    }

    #[tokio::test]
    async fn open_breaker_never_polls_the_call() {
        let clock = ManualClock::new(0);
        let b = breaker(&clock);
        for _ in 0..5 {
            attempt(&b, Outcome::Failure);
        }
        let polled = std::sync::atomic::AtomicBool::new(false);
        let res = b
            .call(
                async {
                    polled.store(true, std::sync::atomic::Ordering::SeqCst);
                    Ok::<_, ()>(())
                },
                |_| Outcome::Success,
            )
            .await;
        assert!(matches!(res, Err(CallError::BreakerOpen)));
        assert!(!polled.load(std::sync::atomic::Ordering::SeqCst));
    }

    #[tokio::test(start_paused = true)]
    async fn timeouts_count_as_failures() {
        let clock = ManualClock::new(0);
        let b = breaker(&clock);
        let res = b
            .call(
                async {
                    tokio::time::sleep(Duration::from_secs(3)).await;
                    Ok::<_, ()>(())
                },
                |_| Outcome::Success,
            )
            .await;
        assert!(matches!(res, Err(CallError::Timeout)));
        assert_eq!(b.state(), BreakerState::Closed { consecutive_failures: 1 });
    }
}
