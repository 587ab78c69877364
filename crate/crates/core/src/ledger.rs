//! Timeline intervals and money.
//!
//! Every second a client participates is covered by exactly one interval
//! (training, spin-up, idle, recovery, or saved); billed states carry the
//! hourly rate in force. Totals use compensated summation so the
//! conservation checks hold tightly over thousands of intervals.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use thiserror::Error;

use crate::scheduler::PolicyMode;
use crate::time::SimTime;
use crate::{ClientId, SECS_PER_HOUR};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum LedgerError {
    #[error("interval for {client} [{start}, {end}] overlaps an existing one")]
    Overlap {
        client: ClientId,
        start: SimTime,
        end: SimTime,
    },
    #[error("interval for {client} is malformed: {reason}")]
    Malformed {
        client: ClientId,
        reason: &'static str,
    },
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
    #[error("baseline cost must be positive, got {0}")]
    NonPositiveBaseline(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum IntervalState {
    SpinUp,
    TrainingCold,
    TrainingWarm,
    Idle,
    /// Instance stopped; nothing is billed.
    Saved,
    /// Replacement spin-up and resumed work after a preemption.
    Recovery,
}

impl IntervalState {
    pub fn name(self) -> &'static str {
        match self {
            IntervalState::SpinUp => "spinup",
            IntervalState::TrainingCold => "training_cold",
            IntervalState::TrainingWarm => "training_warm",
            IntervalState::Idle => "idle",
            IntervalState::Saved => "saved",
            IntervalState::Recovery => "recovery",
        }
    }

    pub fn is_billed(self) -> bool {
        self != IntervalState::Saved
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimelineInterval {
    pub client: ClientId,
    pub round: u32,
    pub state: IntervalState,
    pub start: SimTime,
    pub end: SimTime,
    /// Money per hour; 0 for `Saved`.
    pub rate: f64,
    pub cost: f64,
}

impl TimelineInterval {
    pub fn new(
        client: ClientId,
        round: u32,
        state: IntervalState,
        start: SimTime,
        end: SimTime,
        rate: f64,
    ) -> Result<Self, LedgerError> {
        let malformed = |reason| LedgerError::Malformed { client, reason };
        if !(start.is_valid() && end.is_valid()) {
            return Err(malformed("non-finite bounds"));
        }
        if end < start {
            return Err(malformed("end before start"));
        }
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(malformed("rate must be finite and >= 0"));
        }
        if state == IntervalState::Saved && rate != 0.0 {
            return Err(malformed("saved interval with non-zero rate"));
        }
        Ok(TimelineInterval {
            client,
            round,
            state,
            start,
            end,
            rate,
            cost: (end - start) / SECS_PER_HOUR * rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
struct ClientBook {
    intervals: Vec<TimelineInterval>,
    total: CompensatedSum,
    by_round: BTreeMap<u32, CompensatedSum>,
}

#[derive(Clone, Debug, Default)]
pub struct Ledger {
    clients: Vec<ClientBook>,
    total: CompensatedSum,
    count: usize,
}

impl Ledger {
    pub fn new(clients: usize) -> Self {
        Ledger {
            clients: alloc::vec![ClientBook::default(); clients],
            total: CompensatedSum::default(),
            count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Appends an interval. Overlap with another interval of the same client
    /// is a bookkeeping bug and is rejected; touching endpoints are fine.
    pub fn record_interval(&mut self, interval: TimelineInterval) -> Result<(), LedgerError> {
        // Re-derive to enforce the invariants even for hand-built values.
        let checked = TimelineInterval::new(
            interval.client,
            interval.round,
            interval.state,
            interval.start,
            interval.end,
            interval.rate,
        )?;
        let book = self
            .clients
            .get_mut(checked.client.0)
            .ok_or(LedgerError::UnknownClient(checked.client))?;
        let pos = book.intervals.partition_point(|iv| {
            iv.start < checked.start || (iv.start == checked.start && iv.end <= checked.start)
        });
        let overlaps =
            |other: &TimelineInterval| checked.start < other.end && other.start < checked.end;
        let before = pos.checked_sub(1).map(|i| &book.intervals[i]);
        let after = book.intervals.get(pos);
        if before.is_some_and(overlaps) || after.is_some_and(overlaps) {
            return Err(LedgerError::Overlap {
                client: checked.client,
                start: checked.start,
                end: checked.end,
            });
        }
        book.intervals.insert(pos, checked);
        book.total.add(checked.cost);
        book.by_round
            .entry(checked.round)
            .or_default()
            .add(checked.cost);
        self.total.add(checked.cost);
        self.count += 1;
        Ok(())
    }

    pub fn total_cost(&self) -> f64 {
        self.total.value()
    }

    pub fn client_total(&self, client: ClientId) -> f64 {
        self.clients.get(client.0).map_or(0.0, |b| b.total.value())
    }

    pub fn client_round_cost(&self, client: ClientId, round: u32) -> f64 {
        self.clients
            .get(client.0)
            .and_then(|b| b.by_round.get(&round))
            .map_or(0.0, CompensatedSum::value)
    }

    /// Cost of all intervals with `round <= last_round`.
    pub fn cost_through_round(&self, last_round: u32) -> f64 {
        self.clients
            .iter()
            .flat_map(|b| b.by_round.range(..=last_round).map(|(_, s)| s.value()))
            .collect::<CompensatedSum>()
            .value()
    }

    /// Running per-client total after each of rounds `1..=rounds`.
    pub fn cumulative_series(&self, client: ClientId, rounds: u32) -> Vec<(u32, f64)> {
        let mut acc = CompensatedSum::default();
        (1..=rounds)
            .map(|r| {
                acc.add(self.client_round_cost(client, r));
                (r, acc.value())
            })
            .collect()
    }

    pub fn client_intervals(&self, client: ClientId) -> &[TimelineInterval] {
        self.clients
            .get(client.0)
            .map_or(&[][..], |b| b.intervals.as_slice())
    }

    /// All intervals, grouped by client index then ordered by start time.
    pub fn intervals(&self) -> impl Iterator<Item = &TimelineInterval> {
        self.clients.iter().flat_map(|b| b.intervals.iter())
    }
}

/// `(baseline - policy) / baseline * 100`.
pub fn compute_savings(policy_cost: f64, baseline_cost: f64) -> Result<f64, LedgerError> {
    if !(baseline_cost > 0.0) {
        return Err(LedgerError::NonPositiveBaseline(baseline_cost));
    }
    Ok((baseline_cost - policy_cost) / baseline_cost * 100.0)
}

/// Savings of one policy against the two baselines; absent when the
/// baseline was not run or cost nothing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicySavings {
    pub mode: PolicyMode,
    pub total_cost: f64,
    pub vs_on_demand: Option<f64>,
    pub vs_plain_spot: Option<f64>,
}

pub fn savings_table(totals: &[(PolicyMode, f64)]) -> Vec<PolicySavings> {
    let find = |m: PolicyMode| totals.iter().find(|(mode, _)| *mode == m).map(|(_, c)| *c);
    let on_demand = find(PolicyMode::OnDemand);
    let plain = find(PolicyMode::PlainSpot);
    totals
        .iter()
        .map(|&(mode, total_cost)| {
            let against = |base: Option<f64>, base_mode: PolicyMode| {
                if mode == base_mode {
                    None
                } else {
                    base.and_then(|b| compute_savings(total_cost, b).ok())
                }
            };
            PolicySavings {
                mode,
                total_cost,
                vs_on_demand: against(on_demand, PolicyMode::OnDemand),
                vs_plain_spot: against(plain, PolicyMode::PlainSpot),
            }
        })
        .collect()
}
