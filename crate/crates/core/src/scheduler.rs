//! Cost-aware scheduling policy and its baselines.
//!
//! The FedCostAware policy calibrates per-client cold/warm epoch and spin-up
//! estimates over the first two rounds, then, whenever a client reports
//! early, decides whether its idle wait is long enough to stop the instance
//! and request a new one just before the slowest client is expected to
//! finish. Baselines keep every instance for the whole run.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use log::warn;
use thiserror::Error;

use crate::engine::{Engine, EngineError, Ticket};
use crate::event::SimEvent;
use crate::market::{Market, MarketError, PricingMode};
use crate::time::SimTime;
use crate::{ClientId, InstanceId, SECS_PER_HOUR};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum SchedulerError {
    #[error("calibration round {0} is not 1 or 2")]
    BadCalibrationRound(u32),
    #[error("warm calibration (round 2) before cold calibration (round 1)")]
    WarmBeforeCold,
    #[error("no calibration observation for {0}")]
    MissingObservation(ClientId),
    #[error("estimates for {0} are not calibrated")]
    Uncalibrated(ClientId),
    #[error("slowest-finish estimate over an empty client set")]
    EmptyRound,
    #[error("invalid policy parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PolicyMode {
    #[default]
    FedCostAware,
    PlainSpot,
    OnDemand,
}

impl PolicyMode {
    pub const ALL: [PolicyMode; 3] = [
        PolicyMode::FedCostAware,
        PolicyMode::PlainSpot,
        PolicyMode::OnDemand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyMode::FedCostAware => "fedcostaware",
            PolicyMode::PlainSpot => "plainspot",
            PolicyMode::OnDemand => "ondemand",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        PolicyMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn pricing(self) -> PricingMode {
        match self {
            PolicyMode::OnDemand => PricingMode::OnDemand,
            _ => PricingMode::Spot,
        }
    }
}

impl core::fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_EMA_ALPHA: f64 = 0.3;
pub const DEFAULT_T_THRESHOLD: f64 = 60.0;
pub const DEFAULT_T_BUFFER: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PolicyParams {
    pub mode: PolicyMode,
    /// Minimum net idle saving (idle minus spin-up) that justifies a stop.
    pub t_threshold: f64,
    /// Lead time subtracted from the pre-warm start.
    pub t_buffer: f64,
    pub ema_alpha: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            mode: PolicyMode::FedCostAware,
            t_threshold: DEFAULT_T_THRESHOLD,
            t_buffer: DEFAULT_T_BUFFER,
            ema_alpha: DEFAULT_EMA_ALPHA,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if !(self.t_threshold.is_finite() && self.t_threshold >= 0.0) {
            return Err(SchedulerError::InvalidParams(
                "t_threshold must be >= 0".into(),
            ));
        }
        if !(self.t_buffer.is_finite() && self.t_buffer >= 0.0) {
            return Err(SchedulerError::InvalidParams(
                "t_buffer must be >= 0".into(),
            ));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(SchedulerError::InvalidParams(
                "ema_alpha must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ClientEstimates {
    pub epoch_cold: Option<f64>,
    pub epoch_warm: Option<f64>,
    pub spin_up: Option<f64>,
}

impl ClientEstimates {
    pub fn epoch(&self, cold: bool) -> Option<f64> {
        if cold {
            self.epoch_cold
        } else {
            self.epoch_warm
        }
    }
}

/// One client's timings in a calibration round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingObservation {
    /// From task dispatch (instance request in round 1) to the update.
    pub total: f64,
    /// Time spent executing the epoch.
    pub execution: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerEstimates {
    alpha: f64,
    clients: Vec<ClientEstimates>,
    calibrated_rounds: u32,
}

fn ema(old: Option<f64>, observed: f64, alpha: f64) -> f64 {
    match old {
        // Written as a correction so a repeated exact observation is a fixed point.
        Some(prev) => prev + alpha * (observed - prev),
        None => observed,
    }
}

impl SchedulerEstimates {
    pub fn new(clients: usize, alpha: f64) -> Self {
        SchedulerEstimates {
            alpha,
            clients: alloc::vec![ClientEstimates::default(); clients],
            calibrated_rounds: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn client(&self, client: ClientId) -> ClientEstimates {
        self.clients.get(client.0).copied().unwrap_or_default()
    }

    pub fn calibrated_rounds(&self) -> u32 {
        self.calibrated_rounds
    }

    /// Dynamic termination is allowed only after both calibration rounds.
    pub fn is_calibrated(&self) -> bool {
        self.calibrated_rounds >= 2
    }

    /// Round 1 seeds the cold-epoch and spin-up estimates; round 2 (same
    /// instances, still running) seeds the warm-epoch estimate.
    pub fn calibrate(
        &mut self,
        round: u32,
        participants: &BTreeSet<ClientId>,
        observations: &BTreeMap<ClientId, TimingObservation>,
    ) -> Result<(), SchedulerError> {
        match round {
            1 => {}
            2 if self.calibrated_rounds >= 1 => {}
            2 => return Err(SchedulerError::WarmBeforeCold),
            other => return Err(SchedulerError::BadCalibrationRound(other)),
        }
        if let Some(missing) = participants.iter().find(|c| !observations.contains_key(c)) {
            return Err(SchedulerError::MissingObservation(*missing));
        }
        for (&client, obs) in observations {
            let Some(est) = self.clients.get_mut(client.0) else {
                return Err(SchedulerError::MissingObservation(client));
            };
            if round == 1 {
                est.epoch_cold = Some(obs.execution);
                est.spin_up = Some(obs.total - obs.execution);
            } else {
                est.epoch_warm = Some(obs.execution);
            }
        }
        self.calibrated_rounds = round;
        Ok(())
    }

    /// EMA update after a post-calibration epoch. The spin-up estimate moves
    /// only when the result needed a freshly started instance.
    pub fn update(
        &mut self,
        client: ClientId,
        observed_execution: f64,
        kind: crate::workload::StartKind,
        spin_up_observed: Option<f64>,
    ) -> Result<ClientEstimates, SchedulerError> {
        if !self.is_calibrated() {
            return Err(SchedulerError::Uncalibrated(client));
        }
        let alpha = self.alpha;
        let est = self
            .clients
            .get_mut(client.0)
            .ok_or(SchedulerError::Uncalibrated(client))?;
        match kind {
            crate::workload::StartKind::Cold => {
                est.epoch_cold = Some(ema(est.epoch_cold, observed_execution, alpha));
            }
            crate::workload::StartKind::Warm => {
                est.epoch_warm = Some(ema(est.epoch_warm, observed_execution, alpha));
            }
        }
        if let Some(spin) = spin_up_observed {
            est.spin_up = Some(ema(est.spin_up, spin, alpha));
        }
        Ok(*est)
    }

    /// Spin-up observation without a usable epoch timing (the epoch was
    /// interrupted).
    pub fn observe_spin_up(
        &mut self,
        client: ClientId,
        spin_up: f64,
    ) -> Result<(), SchedulerError> {
        if !self.is_calibrated() {
            return Err(SchedulerError::Uncalibrated(client));
        }
        let alpha = self.alpha;
        let est = self
            .clients
            .get_mut(client.0)
            .ok_or(SchedulerError::Uncalibrated(client))?;
        est.spin_up = Some(ema(est.spin_up, spin_up, alpha));
        Ok(())
    }
}

/// How a client's finish time is estimated in the current round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FinishBasis {
    /// Fresh instance: `start + spin_up + epoch_cold`.
    Cold { start: SimTime },
    /// Running instance: `start + epoch_warm`.
    Warm { start: SimTime },
    /// A finish time already known or predicted by other means
    /// (preemption recovery).
    Known(SimTime),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundClient {
    pub client: ClientId,
    pub basis: FinishBasis,
}

pub fn estimate_finish(
    rc: &RoundClient,
    estimates: &SchedulerEstimates,
) -> Result<SimTime, SchedulerError> {
    let est = estimates.client(rc.client);
    let missing = || SchedulerError::Uncalibrated(rc.client);
    Ok(match rc.basis {
        FinishBasis::Cold { start } => {
            start + est.spin_up.ok_or_else(missing)? + est.epoch_cold.ok_or_else(missing)?
        }
        FinishBasis::Warm { start } => start + est.epoch_warm.ok_or_else(missing)?,
        FinishBasis::Known(at) => at,
    })
}

/// Latest estimated finish over the round's clients (`F_s`).
pub fn estimate_slowest_finish_time(
    round_clients: &[RoundClient],
    estimates: &SchedulerEstimates,
) -> Result<SimTime, SchedulerError> {
    let mut slowest: Option<SimTime> = None;
    for rc in round_clients {
        let finish = estimate_finish(rc, estimates)?;
        slowest = Some(slowest.map_or(finish, |s| s.max(finish)));
    }
    slowest.ok_or(SchedulerError::EmptyRound)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TerminationDecision {
    Terminate { prewarm_at: SimTime },
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TerminationEval {
    pub slowest_finish: SimTime,
    pub idle: f64,
    pub spin_up: f64,
    pub decision: TerminationDecision,
}

/// Stop the instance when `(F_s - F_i) - spin_up > t_threshold`; the
/// pre-warm target is `F_s - spin_up - t_buffer` (not clamped here).
pub fn evaluate_termination(
    client: ClientId,
    finished_at: SimTime,
    round_clients: &[RoundClient],
    params: &PolicyParams,
    estimates: &SchedulerEstimates,
) -> Result<TerminationEval, SchedulerError> {
    let slowest_finish = estimate_slowest_finish_time(round_clients, estimates)?;
    let spin_up = estimates
        .client(client)
        .spin_up
        .ok_or(SchedulerError::Uncalibrated(client))?;
    let idle = slowest_finish - finished_at;
    let decision = if idle - spin_up > params.t_threshold {
        TerminationDecision::Terminate {
            prewarm_at: slowest_finish - spin_up - params.t_buffer,
        }
    } else {
        TerminationDecision::Keep
    };
    Ok(TerminationEval {
        slowest_finish,
        idle,
        spin_up,
        decision,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreWarmEntry {
    /// Requested spin-up start, before clamping to the current time.
    pub spin_up_start: SimTime,
    pub ticket: Ticket,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrewarmAdjustment {
    pub client: ClientId,
    pub old_start: SimTime,
    pub new_start: SimTime,
}

/// Clients whose instances were stopped and will be restarted, one entry per
/// client, each backed by a pending `PreWarmDue` event.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreWarmQueue {
    entries: BTreeMap<ClientId, PreWarmEntry>,
}

impl PreWarmQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, client: ClientId) -> Option<&PreWarmEntry> {
        self.entries.get(&client)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ClientId, &PreWarmEntry)> {
        self.entries.iter().map(|(c, e)| (*c, e))
    }

    /// Queues (or re-queues) a pre-warm. Targets in the past fire now.
    pub fn enqueue(
        &mut self,
        engine: &mut Engine<SimEvent>,
        client: ClientId,
        spin_up_start: SimTime,
    ) -> Result<Ticket, SchedulerError> {
        if let Some(old) = self.entries.remove(&client) {
            engine.cancel(old.ticket);
        }
        let ticket = engine.schedule_clamped(spin_up_start, SimEvent::PreWarmDue { client })?;
        self.entries.insert(
            client,
            PreWarmEntry {
                spin_up_start,
                ticket,
            },
        );
        Ok(ticket)
    }

    /// Removes the entry when its event fires.
    pub fn take(&mut self, client: ClientId) -> Option<PreWarmEntry> {
        self.entries.remove(&client)
    }

    pub fn cancel(&mut self, engine: &mut Engine<SimEvent>, client: ClientId) -> bool {
        match self.entries.remove(&client) {
            Some(entry) => engine.cancel(entry.ticket),
            None => false,
        }
    }

    /// Re-targets every queued pre-warm after a preemption:
    /// `max(original F_s, recovery finish) - spin_up - t_buffer`.
    pub fn adjust_for_preemption(
        &mut self,
        engine: &mut Engine<SimEvent>,
        crashed_client_recovery_finish_time: SimTime,
        original_slowest_finish_time: SimTime,
        estimates: &SchedulerEstimates,
        t_buffer: f64,
    ) -> Result<Vec<PrewarmAdjustment>, SchedulerError> {
        let target = original_slowest_finish_time.max(crashed_client_recovery_finish_time);
        let clients: Vec<ClientId> = self.entries.keys().copied().collect();
        let mut out = Vec::with_capacity(clients.len());
        for client in clients {
            let spin = estimates
                .client(client)
                .spin_up
                .ok_or(SchedulerError::Uncalibrated(client))?;
            let new_start = target - spin - t_buffer;
            let old_start = self.entries[&client].spin_up_start;
            self.enqueue(engine, client, new_start)?;
            out.push(PrewarmAdjustment {
                client,
                old_start,
                new_start,
            });
        }
        Ok(out)
    }
}

/// Handles a due pre-warm: requests an instance in the cheapest candidate
/// zone. A stale entry (client already has an instance) is a warned no-op.
pub fn fire_prewarm<'a, I>(
    queue: &mut PreWarmQueue,
    engine: &mut Engine<SimEvent>,
    market: &mut Market,
    client: ClientId,
    candidate_zones: I,
    t: SimTime,
    mode: PricingMode,
) -> Result<Option<InstanceId>, SchedulerError>
where
    I: IntoIterator<Item = &'a str>,
{
    if queue.take(client).is_none() {
        warn!("pre-warm for {client} at {t} has no queue entry");
        return Ok(None);
    }
    if let Some(inst) = market.live_instance(client) {
        warn!(
            "pre-warm for {client} at {t} skipped: {} is still live",
            inst.id
        );
        return Ok(None);
    }
    let zone: String = market.cheapest_zone(t, candidate_zones)?.into();
    Ok(Some(
        market.request_instance(engine, client, &zone, t, mode)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BudgetDecision {
    Participate,
    Exclude,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetCheck {
    pub decision: BudgetDecision,
    /// `None` before any estimate exists (first round).
    pub estimated_cost: Option<f64>,
}

/// Estimated cost of the next round for one client: spin-up (when no
/// instance is running yet) plus the applicable epoch estimate, priced at
/// `price_per_hour`. Before warm calibration the cold estimate stands in
/// for the warm one.
pub fn estimated_round_cost(
    estimates: &ClientEstimates,
    instance_running: bool,
    cold_epoch: bool,
    price_per_hour: f64,
) -> Option<f64> {
    let epoch = if cold_epoch {
        estimates.epoch_cold?
    } else {
        estimates.epoch_warm.or(estimates.epoch_cold)?
    };
    let spin = if instance_running {
        0.0
    } else {
        estimates.spin_up?
    };
    Some((spin + epoch) / SECS_PER_HOUR * price_per_hour)
}

/// Excludes iff `spent + estimated > budget`. No budget means no limit.
pub fn check_budget(estimated_cost: Option<f64>, spent: f64, budget: Option<f64>) -> BudgetCheck {
    let decision = match (estimated_cost, budget) {
        (Some(cost), Some(limit)) if spent + cost > limit => BudgetDecision::Exclude,
        _ => BudgetDecision::Participate,
    };
    BudgetCheck {
        decision,
        estimated_cost,
    }
}

/// Tracks permanent exclusions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BudgetGate {
    excluded: BTreeMap<ClientId, u32>,
}

impl BudgetGate {
    pub fn is_excluded(&self, client: ClientId) -> bool {
        self.excluded.contains_key(&client)
    }

    pub fn exclude(&mut self, client: ClientId, round: u32) {
        self.excluded.entry(client).or_insert(round);
    }

    pub fn excluded_at(&self, client: ClientId) -> Option<u32> {
        self.excluded.get(&client).copied()
    }
}

/// Inputs for a policy decision when a client reports its update.
#[derive(Clone, Copy, Debug)]
pub struct FinishContext<'a> {
    pub client: ClientId,
    pub finished_at: SimTime,
    pub round: u32,
    pub round_clients: &'a [RoundClient],
    pub estimates: &'a SchedulerEstimates,
}

/// Common interface for the cost-aware policy and the baselines.
pub trait SchedulingPolicy {
    fn mode(&self) -> PolicyMode;

    fn pricing(&self) -> PricingMode {
        self.mode().pricing()
    }

    /// Whether provider preemptions apply to this policy's instances.
    fn preemptible(&self) -> bool {
        self.pricing() == PricingMode::Spot
    }

    fn on_client_finished(
        &self,
        ctx: &FinishContext<'_>,
    ) -> Result<Option<TerminationEval>, SchedulerError>;
}

#[derive(Clone, Copy, Debug)]
pub struct FedCostAware {
    pub params: PolicyParams,
}

impl SchedulingPolicy for FedCostAware {
    fn mode(&self) -> PolicyMode {
        PolicyMode::FedCostAware
    }

    fn on_client_finished(
        &self,
        ctx: &FinishContext<'_>,
    ) -> Result<Option<TerminationEval>, SchedulerError> {
        if !ctx.estimates.is_calibrated() {
            return Ok(None);
        }
        evaluate_termination(
            ctx.client,
            ctx.finished_at,
            ctx.round_clients,
            &self.params,
            ctx.estimates,
        )
        .map(Some)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Baseline {
    mode: PolicyMode,
}

impl Baseline {
    pub fn new(mode: PolicyMode) -> Self {
        debug_assert!(mode != PolicyMode::FedCostAware);
        Baseline { mode }
    }
}

/// Baselines launch once and keep every instance until the run ends; the
/// only difference between them is the billing rate.
pub fn baseline_decide(mode: PolicyMode, _ctx: &FinishContext<'_>) -> TerminationDecision {
    debug_assert!(mode != PolicyMode::FedCostAware);
    TerminationDecision::Keep
}

impl SchedulingPolicy for Baseline {
    fn mode(&self) -> PolicyMode {
        self.mode
    }

    fn on_client_finished(
        &self,
        ctx: &FinishContext<'_>,
    ) -> Result<Option<TerminationEval>, SchedulerError> {
        let _ = baseline_decide(self.mode, ctx);
        Ok(None)
    }
}

pub fn policy_for(params: PolicyParams) -> Box<dyn SchedulingPolicy> {
    match params.mode {
        PolicyMode::FedCostAware => Box::new(FedCostAware { params }),
        mode => Box::new(Baseline::new(mode)),
    }
}
