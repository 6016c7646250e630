//! Refresh cadence and staleness alarms, driven by an injectable clock.

use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::store::SnapshotStore;
use super::{refresh, Embedder};
use crate::error::{Error, Result};
use crate::event_model::UserHistory;

pub trait Clock {
    /// Seconds since the epoch.
    fn now(&self) -> i64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs() as i64)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(t: i64) -> Self {
        ManualClock(AtomicI64::new(t))
    }

    pub fn set(&self, t: i64) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, dt: i64) {
        self.0.fetch_add(dt, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefreshPolicy {
    /// Seconds between refresh attempts.
    pub interval: i64,
    /// Seconds without a fresh snapshot before alarming.
    pub max_staleness: i64,
}

impl Default for RefreshPolicy {
    fn default() -> Self {
        RefreshPolicy {
            interval: 86_400,
            max_staleness: 2 * 86_400,
        }
    }
}

impl RefreshPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.interval <= 0 {
            return Err(Error::config("refresh.interval", "must be positive"));
        }
        if self.interval > self.max_staleness {
            return Err(Error::config("refresh.max_staleness", "must be at least the interval"));
        }
        Ok(())
    }
}

/// Where each refresh gets its input.
pub trait HistorySource {
    fn load(&mut self) -> Result<Vec<UserHistory>>;
}

impl<F: FnMut() -> Result<Vec<UserHistory>>> HistorySource for F {
    fn load(&mut self) -> Result<Vec<UserHistory>> {
        self()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchedulerEvent {
    RefreshSucceeded { at: i64, version: u64, skipped: usize },
    RefreshFailed { at: i64, error: String },
    /// `age` counts from the latest snapshot, or from scheduler start if
    /// nothing was ever published.
    StalenessAlarm { at: i64, age: i64 },
}

pub struct Scheduler<'a, S> {
    store: &'a SnapshotStore,
    embedder: &'a Embedder,
    source: S,
    policy: RefreshPolicy,
    started_at: i64,
    next_due: i64,
}

impl<'a, S: HistorySource> Scheduler<'a, S> {
    /// The first refresh is due one interval after `start`.
    pub fn new(
        store: &'a SnapshotStore,
        embedder: &'a Embedder,
        source: S,
        policy: RefreshPolicy,
        start: i64,
    ) -> Result<Self> {
        policy.validate()?;
        Ok(Scheduler {
            store,
            embedder,
            source,
            policy,
            started_at: start,
            next_due: start + policy.interval,
        })
    }

    pub fn next_due(&self) -> i64 {
        self.next_due
    }

    /// At most one refresh attempt per call; missed slots are not replayed.
    pub fn tick(&mut self, now: i64) -> Vec<SchedulerEvent> {
        let mut events = Vec::new();
        if now >= self.next_due {
            let result = self
                .source
                .load()
                .and_then(|h| refresh(self.store, self.embedder, &h, now));
            match result {
                Ok(out) => events.push(SchedulerEvent::RefreshSucceeded {
                    at: now,
                    version: out.snapshot.snapshot_version,
                    skipped: out.skipped,
                }),
                Err(e) => {
                    log::error!("refresh failed, retrying next tick: {e}");
                    events.push(SchedulerEvent::RefreshFailed {
                        at: now,
                        error: e.to_string(),
                    });
                }
            }
            while self.next_due <= now {
                self.next_due += self.policy.interval;
            }
        }
        let fresh_at = self.store.current().map_or(self.started_at, |s| s.created_at);
        let age = now - fresh_at;
        if age > self.policy.max_staleness {
            log::warn!("embeddings are stale: {age}s since last snapshot");
            events.push(SchedulerEvent::StalenessAlarm { at: now, age });
        }
        events
    }

    /// Ticks until `stop` is set, sleeping `poll` between ticks.
    pub fn run(&mut self, clock: &dyn Clock, stop: &AtomicBool, poll: Duration) {
        while !stop.load(Ordering::SeqCst) {
            self.tick(clock.now());
            std::thread::sleep(poll);
        }
    }
}
