//! Virtual-clock discrete-event engine.
//!
//! Events are kept in an ordered map keyed by `(fire_at, sequence)`, so equal
//! timestamps are delivered in insertion order and cancellation is a plain
//! removal. The engine is generic over its payload; the simulator uses
//! [`crate::SimEvent`].

use alloc::collections::BTreeMap;
use core::cmp::Ordering;

use thiserror::Error;

use crate::time::SimTime;

/// Default runaway-loop guard: maximum number of dispatched events per run.
pub const DEFAULT_EVENT_CAP: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Error)]
pub enum EngineError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    Causality { at: SimTime, now: SimTime },
    #[error("event time {0:?} is not a finite non-negative number")]
    NonFinite(f64),
    #[error("dispatched more than {cap} events; aborting run")]
    EventCap { cap: u64 },
}

/// Handle to a scheduled event, used to cancel it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ticket {
    key: QueueKey,
}

impl Ticket {
    pub fn sequence(&self) -> u64 {
        self.key.sequence
    }

    pub fn fire_at(&self) -> SimTime {
        SimTime::from_secs(f64::from_bits(self.key.time_bits))
    }
}

// Bit pattern of a non-negative finite f64 orders the same way as the value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct QueueKey {
    time_bits: u64,
    sequence: u64,
}

impl QueueKey {
    fn new(at: SimTime, sequence: u64) -> Self {
        // -0.0 would sort after every positive time.
        let secs = if at.secs() == 0.0 { 0.0 } else { at.secs() };
        QueueKey {
            time_bits: secs.to_bits(),
            sequence,
        }
    }
}

impl PartialOrd for QueueKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time_bits
            .cmp(&other.time_bits)
            .then(self.sequence.cmp(&other.sequence))
    }
}

/// An event handed to the caller when it fires.
#[derive(Clone, Debug, PartialEq)]
pub struct Delivered<P> {
    pub fire_at: SimTime,
    pub sequence: u64,
    pub payload: P,
}

#[derive(Clone, Debug)]
pub struct Engine<P> {
    now: SimTime,
    next_sequence: u64,
    queue: BTreeMap<QueueKey, P>,
    dispatched: u64,
    event_cap: u64,
}

impl<P> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Engine<P> {
    pub fn new() -> Self {
        Self::with_event_cap(DEFAULT_EVENT_CAP)
    }

    pub fn with_event_cap(event_cap: u64) -> Self {
        Engine {
            now: SimTime::ZERO,
            next_sequence: 1,
            queue: BTreeMap::new(),
            dispatched: 0,
            event_cap,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Number of events delivered so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: P) -> Result<Ticket, EngineError> {
        if !fire_at.is_valid() {
            return Err(EngineError::NonFinite(fire_at.secs()));
        }
        if fire_at < self.now {
            return Err(EngineError::Causality {
                at: fire_at,
                now: self.now,
            });
        }
        let key = QueueKey::new(fire_at, self.next_sequence);
        self.next_sequence += 1;
        self.queue.insert(key, payload);
        Ok(Ticket { key })
    }

    /// Schedules at `fire_at`, or at the current time if `fire_at` has passed.
    pub fn schedule_clamped(
        &mut self,
        fire_at: SimTime,
        payload: P,
    ) -> Result<Ticket, EngineError> {
        let at = fire_at.max(self.now);
        self.schedule(at, payload)
    }

    /// Removes a pending event. Returns `false` if it already fired or was
    /// already cancelled.
    pub fn cancel(&mut self, ticket: Ticket) -> bool {
        self.queue.remove(&ticket.key).is_some()
    }

    pub fn is_pending(&self, ticket: Ticket) -> bool {
        self.queue.contains_key(&ticket.key)
    }

    /// Pops the next event and advances the clock to it.
    pub fn pop(&mut self) -> Result<Option<Delivered<P>>, EngineError> {
        let Some((key, payload)) = self.queue.pop_first() else {
            return Ok(None);
        };
        if self.dispatched >= self.event_cap {
            self.queue.insert(key, payload);
            return Err(EngineError::EventCap {
                cap: self.event_cap,
            });
        }
        self.dispatched += 1;
        let fire_at = SimTime::from_secs(f64::from_bits(key.time_bits));
        debug_assert!(fire_at >= self.now);
        self.now = fire_at;
        Ok(Some(Delivered {
            fire_at,
            sequence: key.sequence,
            payload,
        }))
    }

    /// Dispatches events in `(fire_at, sequence)` order until the queue is
    /// empty and returns the time of the last delivered event.
    pub fn run_until_quiescent<F, E>(&mut self, mut handler: F) -> Result<SimTime, E>
    where
        F: FnMut(&mut Self, Delivered<P>) -> Result<(), E>,
        E: From<EngineError>,
    {
        while let Some(event) = self.pop()? {
            handler(self, event)?;
        }
        Ok(self.now)
    }
}
