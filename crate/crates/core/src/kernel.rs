//! Virtual-time event loop.
//!
//! Every component of the model schedules its work against a single
//! [`EventQueue`]. Events are totally ordered by `(fire_time, ordinal)`, where
//! the ordinal is a monotone insertion counter, so two events scheduled for the
//! same instant always fire in the order they were scheduled.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Deterministic generator used for every random draw in a run.
///
/// ChaCha8 seeded through `seed_from_u64`; the algorithm is fixed for a
/// release so that a seed always reproduces the same trace.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Nanoseconds since the start of a simulation.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn since(self, earlier: SimTime) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: Duration) -> SimTime {
        let ns = u64::try_from(rhs.as_nanos()).unwrap_or(u64::MAX);
        SimTime(self.0.saturating_add(ns))
    }
}

impl Sub<Duration> for SimTime {
    type Output = SimTime;

    fn sub(self, rhs: Duration) -> SimTime {
        let ns = u64::try_from(rhs.as_nanos()).unwrap_or(u64::MAX);
        SimTime(self.0.saturating_sub(ns))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Unique handle of a scheduled event (its insertion ordinal).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    InThePast { at: SimTime, now: SimTime },
    #[error("cannot run until {until}: the clock is already at {now}")]
    RewindRequested { until: SimTime, now: SimTime },
}

/// A queued event. `action` is an opaque token interpreted by whoever drains
/// the queue.
#[derive(Debug)]
pub struct Event<A> {
    pub fire_time: SimTime,
    pub ordinal: u64,
    pub action: A,
}

impl<A> PartialEq for Event<A> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_time == other.fire_time && self.ordinal == other.ordinal
    }
}

impl<A> Eq for Event<A> {}

impl<A> Ord for Event<A> {
    // BinaryHeap is a max-heap; invert so the earliest (time, ordinal) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_time, other.ordinal).cmp(&(self.fire_time, self.ordinal))
    }
}

impl<A> PartialOrd for Event<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
pub struct EventQueue<A> {
    now: SimTime,
    next_ordinal: u64,
    heap: BinaryHeap<Event<A>>,
    fired: u64,
}

impl<A> Default for EventQueue<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A> EventQueue<A> {
    pub fn new() -> Self {
        EventQueue {
            now: SimTime::ZERO,
            next_ordinal: 0,
            heap: BinaryHeap::new(),
            fired: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Total number of events fired since creation.
    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.fire_time)
    }

    pub fn schedule(&mut self, at: SimTime, action: impl Into<A>) -> Result<EventId, KernelError> {
        if at < self.now {
            return Err(KernelError::InThePast { at, now: self.now });
        }
        let ordinal = self.next_ordinal;
        self.next_ordinal += 1;
        self.heap.push(Event {
            fire_time: at,
            ordinal,
            action: action.into(),
        });
        Ok(EventId(ordinal))
    }

    /// Schedules `delay` after the current time. Never fails.
    pub fn schedule_in(&mut self, delay: Duration, action: impl Into<A>) -> EventId {
        let at = self.now + delay;
        self.schedule(at, action)
            .expect("a non-negative delay cannot land in the past")
    }

    /// Pops the next event if it fires no later than `until`, advancing the
    /// clock to its fire time.
    pub fn pop_due(&mut self, until: SimTime) -> Option<Event<A>> {
        if self.heap.peek()?.fire_time > until {
            return None;
        }
        let event = self.heap.pop()?;
        debug_assert!(event.fire_time >= self.now);
        self.now = event.fire_time;
        self.fired += 1;
        Some(event)
    }

    /// Fires every event with `fire_time <= until` (including events scheduled
    /// by handlers inside the window) and leaves the clock at `until`.
    pub fn run_until<F>(&mut self, until: SimTime, mut handler: F) -> Result<u64, KernelError>
    where
        F: FnMut(&mut Self, SimTime, A),
    {
        if until < self.now {
            return Err(KernelError::RewindRequested {
                until,
                now: self.now,
            });
        }
        let mut count = 0;
        while let Some(event) = self.pop_due(until) {
            handler(self, event.fire_time, event.action);
            count += 1;
        }
        self.now = until;
        Ok(count)
    }
}
