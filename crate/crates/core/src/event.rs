//! Event payloads used by the simulator.

use alloc::string::String;

use crate::{ClientId, InstanceId};

#[derive(Clone, Debug, PartialEq)]
pub enum SimEvent {
    /// Pre-round budget gate for `round`; schedules `RoundStart` when done.
    BudgetCheck {
        round: u32,
    },
    RoundStart {
        round: u32,
    },
    InstanceReady {
        client: ClientId,
        instance: InstanceId,
    },
    EpochComplete {
        client: ClientId,
        round: u32,
    },
    PreWarmDue {
        client: ClientId,
    },
    Preemption(PreemptionTarget),
}

#[derive(Clone, Debug, PartialEq)]
pub enum PreemptionTarget {
    /// A pre-sampled preemption for one instance.
    Instance(InstanceId),
    /// A trace entry: every training instance in the zone is reclaimed.
    Zone(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EventKind {
    EpochComplete,
    InstanceReady,
    PreWarmDue,
    Preemption,
    RoundStart,
    BudgetCheck,
}

impl SimEvent {
    pub fn kind(&self) -> EventKind {
        match self {
            SimEvent::BudgetCheck { .. } => EventKind::BudgetCheck,
            SimEvent::RoundStart { .. } => EventKind::RoundStart,
            SimEvent::InstanceReady { .. } => EventKind::InstanceReady,
            SimEvent::EpochComplete { .. } => EventKind::EpochComplete,
            SimEvent::PreWarmDue { .. } => EventKind::PreWarmDue,
            SimEvent::Preemption(_) => EventKind::Preemption,
        }
    }
}
