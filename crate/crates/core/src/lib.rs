//! Deterministic simulation core for cost-aware synchronous federated learning
//! on spot instances.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is a pure function
//! of the scenario and its seeds; file formats, the CLI, and reporting live in
//! the `spotfl` companion crate.
//!
//! Layout:
//! - [`engine`]: virtual-clock event queue with FIFO tie-breaking and cancellation.
//! - [`market`]: zones, price traces, provisioning and preemption models, billing.
//! - [`workload`]: client profiles, epoch timing, round barrier, checkpoints.
//! - [`scheduler`]: estimators, termination rule, pre-warm queue, budget gate.
//! - [`ledger`]: timeline intervals, cost totals, savings.
//! - [`sim`]: ties the above together into a full run under one policy.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod engine;
pub mod event;
pub mod ledger;
pub mod market;
pub mod rng;
pub mod scenario;
pub mod scheduler;
pub mod sim;
pub mod time;
pub mod workload;

use core::fmt;

pub use engine::{Delivered, Engine, EngineError, Ticket};
pub use event::{EventKind, SimEvent};
pub use ledger::{compute_savings, IntervalState, Ledger, LedgerError, TimelineInterval};
pub use market::{InstanceHandle, InstanceState, Market, MarketError, PricingMode};
pub use scenario::{ConfigError, ScenarioConfig};
pub use scheduler::{PolicyMode, PolicyParams, SchedulerEstimates, TerminationDecision};
pub use sim::{simulate, RunOutcome, SimError};
pub use time::SimTime;
pub use workload::{ClientProfile, StartKind};

/// Index of a client within its scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClientId(pub usize);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client#{}", self.0)
    }
}

/// Market-wide unique instance identifier, assigned in request order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i-{:06}", self.0)
    }
}

/// Seconds per billing hour.
pub const SECS_PER_HOUR: f64 = 3600.0;
