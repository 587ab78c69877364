//! One full run of a scenario under one policy.
//!
//! The driver owns the engine, market, workload and scheduler state and
//! reacts to each event in turn. Besides the cost ledger it records the
//! decisions it made so tests and reports can check them after the fact.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use log::{debug, warn};
use thiserror::Error;

use crate::engine::{Delivered, Engine, EngineError, Ticket, DEFAULT_EVENT_CAP};
use crate::event::{EventKind, PreemptionTarget, SimEvent};
use crate::ledger::{IntervalState, Ledger, LedgerError, TimelineInterval};
use crate::market::{
    InstanceHandle, InstanceState, Market, MarketError, PreemptionKind, PricingMode,
};
use crate::scenario::{ConfigError, ScenarioConfig};
use crate::scheduler::{
    check_budget, estimate_slowest_finish_time, estimated_round_cost, fire_prewarm, policy_for,
    BudgetDecision, BudgetGate, FinishBasis, FinishContext, PolicyMode, PolicyParams, PreWarmQueue,
    PrewarmAdjustment, RoundClient, SchedulerError, SchedulerEstimates, SchedulingPolicy,
    TerminationDecision, TerminationEval, TimingObservation,
};
use crate::time::SimTime;
use crate::workload::{
    BarrierStatus, CheckpointRecord, RecoveryPlan, RoundState, StartKind, Workload, WorkloadError,
};
use crate::{ClientId, InstanceId};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl SimError {
    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Config(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub started_at: SimTime,
    pub barrier_at: Option<SimTime>,
    pub participants: Vec<ClientId>,
    /// Time each participant waited between round start and epoch start.
    pub start_delays: BTreeMap<ClientId, f64>,
    /// Estimated slowest finish at round start (once calibrated).
    pub estimated_slowest_finish: Option<SimTime>,
}

/// A pre-warm from the moment it is queued until its instance is ready.
#[derive(Clone, Debug, PartialEq)]
pub struct PrewarmRecord {
    pub client: ClientId,
    /// Round the instance is meant for.
    pub for_round: u32,
    pub queued_at: SimTime,
    /// Estimated slowest finish of the round in which it was queued, moved
    /// forward by preemption adjustments.
    pub slowest_finish: SimTime,
    pub spin_up_start: SimTime,
    pub fired_at: Option<SimTime>,
    pub instance: Option<InstanceId>,
    pub ready_at: Option<SimTime>,
    pub cancelled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Termination {
        at: SimTime,
        round: u32,
        client: ClientId,
        eval: TerminationEval,
    },
    Excluded {
        at: SimTime,
        round: u32,
        client: ClientId,
        estimated_cost: Option<f64>,
        spent: f64,
        budget: Option<f64>,
    },
    Preempted {
        at: SimTime,
        plan: RecoveryPlan,
    },
    PreemptionIgnored {
        at: SimTime,
        client: ClientId,
    },
    PrewarmAdjusted {
        at: SimTime,
        original_slowest_finish: SimTime,
        recovery_finish: SimTime,
        adjustment: PrewarmAdjustment,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventRecord {
    pub at: SimTime,
    pub sequence: u64,
    pub kind: EventKind,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub mode: PolicyMode,
    pub params: PolicyParams,
    pub rounds: u32,
    pub rounds_completed: u32,
    pub client_ids: Vec<String>,
    pub budgets: Vec<Option<f64>>,
    pub ledger: Ledger,
    pub instances: Vec<InstanceHandle>,
    pub round_records: Vec<RoundRecord>,
    pub prewarms: Vec<PrewarmRecord>,
    pub decisions: Vec<Decision>,
    pub events: Vec<EventRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub estimates: SchedulerEstimates,
    pub gate: BudgetGate,
    pub final_time: SimTime,
    /// Sum of every instance's billed window, computed by the market.
    pub instance_accruals: f64,
}

impl RunOutcome {
    pub fn total_cost(&self) -> f64 {
        self.ledger.total_cost()
    }

    /// Cost of the two calibration rounds.
    pub fn calibration_cost(&self) -> f64 {
        self.ledger.cost_through_round(2)
    }

    pub fn client_spent(&self, client: ClientId) -> f64 {
        self.ledger.client_total(client)
    }

    pub fn terminations(&self) -> impl Iterator<Item = (u32, ClientId, &TerminationEval)> {
        self.decisions.iter().filter_map(|d| match d {
            Decision::Termination {
                round,
                client,
                eval,
                ..
            } if matches!(eval.decision, TerminationDecision::Terminate { .. }) => {
                Some((*round, *client, eval))
            }
            _ => None,
        })
    }

    pub fn termination_count(&self) -> usize {
        self.terminations().count()
    }
}

#[derive(Clone, Copy, Debug)]
struct Track {
    state: IntervalState,
    since: SimTime,
    round: u32,
    instance: Option<InstanceId>,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    params: PolicyParams,
    policy: Box<dyn SchedulingPolicy>,
    pricing: PricingMode,
    engine: Engine<SimEvent>,
    market: Market,
    workload: Workload,
    estimates: SchedulerEstimates,
    prewarm: PreWarmQueue,
    gate: BudgetGate,
    ledger: Ledger,
    tracks: Vec<Option<Track>>,
    round: Option<RoundState>,
    round_clients: Vec<RoundClient>,
    /// Participants whose instance is still spinning up.
    waiting: BTreeSet<ClientId>,
    /// Running instances that have not trained yet.
    fresh: BTreeSet<ClientId>,
    /// Spin-up of the instance each client currently holds.
    spin_obs: BTreeMap<ClientId, f64>,
    calibration: BTreeMap<ClientId, TimingObservation>,
    /// Excluded clients whose instance must be stopped once it is ready.
    teardown: BTreeSet<ClientId>,
    /// Index into `prewarms` of each client's open pre-warm.
    open_prewarm: BTreeMap<ClientId, usize>,
    zone_tickets: Vec<Ticket>,
    records: Vec<RoundRecord>,
    prewarms: Vec<PrewarmRecord>,
    decisions: Vec<Decision>,
    events: Vec<EventRecord>,
    done: bool,
}

/// Runs `config` under `mode` (overriding the mode in the config).
pub fn simulate(config: &ScenarioConfig, mode: PolicyMode) -> Result<RunOutcome, SimError> {
    let cfg = config.with_mode(mode);
    cfg.validate()?;
    let params = cfg.policy;
    let n = cfg.clients.len();
    let mut sim = Sim {
        cfg: &cfg,
        params,
        policy: policy_for(params),
        pricing: mode.pricing(),
        engine: Engine::with_event_cap(cfg.event_cap.unwrap_or(DEFAULT_EVENT_CAP)),
        market: cfg.build_market(mode)?,
        workload: cfg.build_workload()?,
        estimates: SchedulerEstimates::new(n, params.ema_alpha),
        prewarm: PreWarmQueue::new(),
        gate: BudgetGate::default(),
        ledger: Ledger::new(n),
        tracks: alloc::vec![None; n],
        round: None,
        round_clients: Vec::new(),
        waiting: BTreeSet::new(),
        fresh: BTreeSet::new(),
        spin_obs: BTreeMap::new(),
        calibration: BTreeMap::new(),
        teardown: BTreeSet::new(),
        open_prewarm: BTreeMap::new(),
        zone_tickets: Vec::new(),
        records: Vec::new(),
        prewarms: Vec::new(),
        decisions: Vec::new(),
        events: Vec::new(),
        done: false,
    };
    sim.run()?;
    sim.finish()
}

fn clients(n: usize) -> impl Iterator<Item = ClientId> {
    (0..n).map(ClientId)
}

impl<'a> Sim<'a> {
    fn run(&mut self) -> Result<(), SimError> {
        if let PreemptionKind::Trace(entries) = &self.market.preemption().kind {
            for e in entries.clone() {
                let ticket = self.engine.schedule(
                    SimTime::from_secs(e.fire_at),
                    SimEvent::Preemption(PreemptionTarget::Zone(e.zone)),
                )?;
                self.zone_tickets.push(ticket);
            }
        }
        self.engine
            .schedule(SimTime::ZERO, SimEvent::BudgetCheck { round: 1 })?;
        while let Some(ev) = self.engine.pop()? {
            self.dispatch(ev)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, ev: Delivered<SimEvent>) -> Result<(), SimError> {
        let t = ev.fire_at;
        self.events.push(EventRecord {
            at: t,
            sequence: ev.sequence,
            kind: ev.payload.kind(),
        });
        debug!("{t} #{} {:?}", ev.sequence, ev.payload);
        match ev.payload {
            SimEvent::BudgetCheck { round } => self.on_budget_check(round, t),
            SimEvent::RoundStart { round } => self.on_round_start(round, t),
            SimEvent::InstanceReady { client, instance } => {
                self.on_instance_ready(client, instance, t)
            }
            SimEvent::EpochComplete { client, round } => self.on_epoch_complete(client, round, t),
            SimEvent::PreWarmDue { client } => self.on_prewarm_due(client, t),
            SimEvent::Preemption(target) => self.on_preemption(target, t),
        }
    }

    // ---- timeline tracks -------------------------------------------------

    fn close_track(&mut self, client: ClientId, t: SimTime) -> Result<(), SimError> {
        let Some(track) = self.tracks[client.0] else {
            return Ok(());
        };
        if t < track.since {
            return Err(SimError::Invariant(format!(
                "{client}: closing interval at {t} before its start {}",
                track.since
            )));
        }
        if t == track.since {
            return Ok(());
        }
        match (track.state.is_billed(), track.instance) {
            (true, Some(id)) => {
                for seg in self.market.billing_segments(id, track.since, t)? {
                    if seg.end > seg.start {
                        self.ledger.record_interval(TimelineInterval::new(
                            client,
                            track.round,
                            track.state,
                            seg.start,
                            seg.end,
                            seg.rate,
                        )?)?;
                    }
                }
            }
            (false, _) => {
                self.ledger.record_interval(TimelineInterval::new(
                    client,
                    track.round,
                    track.state,
                    track.since,
                    t,
                    0.0,
                )?)?;
            }
            (true, None) => {
                return Err(SimError::Invariant(format!(
                    "{client}: billed {} interval without an instance",
                    track.state.name()
                )))
            }
        }
        Ok(())
    }

    fn set_state(
        &mut self,
        client: ClientId,
        state: IntervalState,
        instance: Option<InstanceId>,
        t: SimTime,
    ) -> Result<(), SimError> {
        self.close_track(client, t)?;
        let round = self.tracks[client.0]
            .map(|tr| tr.round)
            .or(self.round.as_ref().map(|r| r.index))
            .unwrap_or(1);
        self.tracks[client.0] = Some(Track {
            state,
            since: t,
            round,
            instance,
        });
        Ok(())
    }

    fn end_track(&mut self, client: ClientId, t: SimTime) -> Result<(), SimError> {
        self.close_track(client, t)?;
        self.tracks[client.0] = None;
        Ok(())
    }

    /// Cuts every open track at a round boundary.
    fn roll_tracks(&mut self, next_round: u32, t: SimTime) -> Result<(), SimError> {
        for c in clients(self.tracks.len()) {
            if let Some(track) = self.tracks[c.0] {
                self.close_track(c, t)?;
                self.tracks[c.0] = Some(Track {
                    since: t,
                    round: next_round,
                    ..track
                });
            }
        }
        Ok(())
    }

    /// Cost already incurred but not yet closed into the ledger.
    fn open_cost(&self, client: ClientId, t: SimTime) -> Result<f64, SimError> {
        match self.tracks[client.0] {
            Some(Track {
                state,
                since,
                instance: Some(id),
                ..
            }) if state.is_billed() && t > since => Ok(self.market.accrue_cost(id, since, t, t)?),
            _ => Ok(0.0),
        }
    }

    // ---- instances -------------------------------------------------------

    fn candidate_zones(&self, client: ClientId) -> Vec<&'a str> {
        self.cfg.clients[client.0]
            .candidate_zones
            .iter()
            .map(String::as_str)
            .collect()
    }

    fn request(&mut self, client: ClientId, t: SimTime) -> Result<InstanceId, SimError> {
        let zones = self.candidate_zones(client);
        let zone: String = self.market.cheapest_zone(t, zones)?.into();
        let id = self
            .market
            .request_instance(&mut self.engine, client, &zone, t, self.pricing)?;
        self.set_state(client, IntervalState::SpinUp, Some(id), t)?;
        Ok(id)
    }

    fn stop_instance(&mut self, client: ClientId, t: SimTime) -> Result<(), SimError> {
        if let Some(inst) = self.market.live_instance(client) {
            let id = inst.id;
            self.market.terminate_instance(&mut self.engine, id, t)?;
        }
        self.fresh.remove(&client);
        Ok(())
    }

    fn cancel_prewarm(&mut self, client: ClientId) {
        self.prewarm.cancel(&mut self.engine, client);
        if let Some(idx) = self.open_prewarm.remove(&client) {
            let rec = &mut self.prewarms[idx];
            if rec.fired_at.is_none() {
                rec.cancelled = true;
            }
        }
    }

    // ---- handlers --------------------------------------------------------

    fn on_budget_check(&mut self, round: u32, t: SimTime) -> Result<(), SimError> {
        for c in clients(self.cfg.clients.len()) {
            if self.gate.is_excluded(c) {
                continue;
            }
            let budget = self.cfg.clients[c.0].budget;
            if budget.is_none() {
                continue;
            }
            let live = self.market.live_instance(c);
            let running = live.is_some();
            let cold = match live {
                None => true,
                Some(inst) => inst.state == InstanceState::Requested || self.fresh.contains(&c),
            };
            let zone: String = match live {
                Some(inst) => inst.zone.clone(),
                None => self
                    .market
                    .cheapest_zone(t, self.candidate_zones(c))?
                    .into(),
            };
            let price = self.market.price_at(&zone, t, self.pricing)?;
            let est = estimated_round_cost(&self.estimates.client(c), running, cold, price);
            let spent = self.ledger.client_total(c) + self.open_cost(c, t)?;
            let check = check_budget(est, spent, budget);
            if check.decision == BudgetDecision::Exclude {
                self.exclude(c, round, t, check.estimated_cost, spent, budget)?;
            }
        }
        self.engine.schedule(t, SimEvent::RoundStart { round })?;
        Ok(())
    }

    fn exclude(
        &mut self,
        client: ClientId,
        round: u32,
        t: SimTime,
        estimated_cost: Option<f64>,
        spent: f64,
        budget: Option<f64>,
    ) -> Result<(), SimError> {
        self.gate.exclude(client, round);
        self.decisions.push(Decision::Excluded {
            at: t,
            round,
            client,
            estimated_cost,
            spent,
            budget,
        });
        self.cancel_prewarm(client);
        match self.market.live_instance(client).map(|i| i.state) {
            Some(InstanceState::Running) => {
                self.stop_instance(client, t)?;
                self.end_track(client, t)?;
            }
            Some(InstanceState::Requested) => {
                self.teardown.insert(client);
            }
            _ => self.end_track(client, t)?,
        }
        Ok(())
    }

    fn on_round_start(&mut self, round: u32, t: SimTime) -> Result<(), SimError> {
        let participants: BTreeSet<ClientId> = clients(self.cfg.clients.len())
            .filter(|c| !self.gate.is_excluded(*c))
            .collect();
        if participants.is_empty() {
            warn!("round {round}: every client is excluded; stopping");
            self.shutdown(t)?;
            return Ok(());
        }
        let state = RoundState::new(round, t, participants.clone());
        self.round = Some(state);
        self.round_clients.clear();
        let mut delays = BTreeMap::new();
        for &c in &participants {
            let live = self
                .market
                .live_instance(c)
                .map(|i| (i.state, i.requested_at));
            let basis = match live {
                Some((InstanceState::Running, requested_at)) => {
                    let kind = if self.fresh.contains(&c) {
                        StartKind::Cold
                    } else {
                        StartKind::Warm
                    };
                    self.start_epoch(c, kind, t)?;
                    delays.insert(c, 0.0);
                    match kind {
                        StartKind::Warm => FinishBasis::Warm { start: t },
                        StartKind::Cold => {
                            let spin = self.estimates.client(c).spin_up.unwrap_or(0.0);
                            FinishBasis::Cold {
                                start: requested_at.max(t - spin),
                            }
                        }
                    }
                }
                Some((_, requested_at)) => {
                    self.waiting.insert(c);
                    FinishBasis::Cold {
                        start: requested_at,
                    }
                }
                None => {
                    if self.prewarm.get(c).is_some() {
                        // Target lies beyond the actual barrier; start now.
                        self.cancel_prewarm(c);
                    }
                    self.request(c, t)?;
                    self.waiting.insert(c);
                    FinishBasis::Cold { start: t }
                }
            };
            self.round_clients.push(RoundClient { client: c, basis });
        }
        let estimated_slowest_finish = if self.estimates.is_calibrated() {
            Some(estimate_slowest_finish_time(
                &self.round_clients,
                &self.estimates,
            )?)
        } else {
            None
        };
        self.records.push(RoundRecord {
            round,
            started_at: t,
            barrier_at: None,
            participants: participants.into_iter().collect(),
            start_delays: delays,
            estimated_slowest_finish,
        });
        Ok(())
    }

    fn start_epoch(
        &mut self,
        client: ClientId,
        kind: StartKind,
        t: SimTime,
    ) -> Result<(), SimError> {
        let round = self.round.as_ref().ok_or_else(|| {
            SimError::Invariant(format!("{client} started training outside a round"))
        })?;
        self.workload
            .start_epoch(&mut self.engine, &self.market, round, client, t, kind)?;
        self.fresh.remove(&client);
        let instance = self.market.live_instance(client).map(|i| i.id);
        let state = match kind {
            StartKind::Cold => IntervalState::TrainingCold,
            StartKind::Warm => IntervalState::TrainingWarm,
        };
        self.set_state(client, state, instance, t)
    }

    fn on_instance_ready(
        &mut self,
        client: ClientId,
        instance: InstanceId,
        t: SimTime,
    ) -> Result<(), SimError> {
        self.market.mark_ready(instance, t)?;
        let spin = t - self.market.instance(instance)?.requested_at;
        if let Some(idx) = self.open_prewarm.remove(&client) {
            self.prewarms[idx].ready_at = Some(t);
        }
        if self.teardown.remove(&client) || self.gate.is_excluded(client) || self.done {
            self.stop_instance(client, t)?;
            self.end_track(client, t)?;
            return Ok(());
        }
        self.spin_obs.insert(client, spin);
        if self.workload.awaiting_recovery(client) {
            self.workload
                .resume_after_recovery(&mut self.engine, client, t)?;
            if self.estimates.is_calibrated() {
                self.estimates.observe_spin_up(client, spin)?;
            }
            return Ok(());
        }
        if self.waiting.remove(&client) {
            self.start_epoch(client, StartKind::Cold, t)?;
            let round = self.round.as_ref().map(|r| r.index);
            if let Some(rec) = self.records.last_mut().filter(|r| Some(r.round) == round) {
                rec.start_delays.insert(client, t - rec.started_at);
            }
            return Ok(());
        }
        self.fresh.insert(client);
        self.set_state(client, IntervalState::Idle, Some(instance), t)
    }

    fn on_epoch_complete(
        &mut self,
        client: ClientId,
        round_idx: u32,
        t: SimTime,
    ) -> Result<(), SimError> {
        let mut round = self
            .round
            .take()
            .filter(|r| r.index == round_idx)
            .ok_or_else(|| {
                SimError::Invariant(format!(
                    "epoch of {client} completed outside round {round_idx}"
                ))
            })?;
        let result = self.workload.on_epoch_complete(&mut round, client, t);
        self.round = Some(round);
        let (run, status) = result?;
        let instance = self.market.live_instance(client).map(|i| i.id);
        self.set_state(client, IntervalState::Idle, instance, t)?;

        if round_idx <= 2 {
            let spin = if round_idx == 1 {
                self.spin_obs.get(&client).copied().unwrap_or(0.0)
            } else {
                0.0
            };
            self.calibration.insert(
                client,
                TimingObservation {
                    total: spin + run.work,
                    execution: run.work,
                },
            );
        } else if run.preemptions == 0 {
            let spin = match run.kind {
                StartKind::Cold => self.spin_obs.get(&client).copied(),
                StartKind::Warm => None,
            };
            self.estimates.update(client, run.work, run.kind, spin)?;
        }

        match status {
            BarrierStatus::Pending { .. } => self.consult_policy(client, round_idx, t),
            BarrierStatus::Complete { at } => self.complete_round(round_idx, at),
        }
    }

    fn consult_policy(&mut self, client: ClientId, round: u32, t: SimTime) -> Result<(), SimError> {
        let ctx = FinishContext {
            client,
            finished_at: t,
            round,
            round_clients: &self.round_clients,
            estimates: &self.estimates,
        };
        let Some(eval) = self.policy.on_client_finished(&ctx)? else {
            return Ok(());
        };
        self.decisions.push(Decision::Termination {
            at: t,
            round,
            client,
            eval,
        });
        if let TerminationDecision::Terminate { prewarm_at } = eval.decision {
            self.stop_instance(client, t)?;
            self.set_state(client, IntervalState::Saved, None, t)?;
            if round < self.cfg.rounds {
                self.prewarm.enqueue(&mut self.engine, client, prewarm_at)?;
                self.open_prewarm.insert(client, self.prewarms.len());
                self.prewarms.push(PrewarmRecord {
                    client,
                    for_round: round + 1,
                    queued_at: t,
                    slowest_finish: eval.slowest_finish,
                    spin_up_start: prewarm_at,
                    fired_at: None,
                    instance: None,
                    ready_at: None,
                    cancelled: false,
                });
            }
        }
        Ok(())
    }

    fn complete_round(&mut self, round: u32, at: SimTime) -> Result<(), SimError> {
        if round <= 2 {
            let participants = self
                .round
                .as_ref()
                .map(|r| r.participants.clone())
                .unwrap_or_default();
            self.estimates
                .calibrate(round, &participants, &self.calibration)?;
            self.calibration.clear();
        }
        if let Some(rec) = self.records.last_mut().filter(|r| r.round == round) {
            rec.barrier_at = Some(at);
        }
        if round >= self.cfg.rounds {
            return self.shutdown(at);
        }
        self.roll_tracks(round + 1, at)?;
        self.engine
            .schedule(at, SimEvent::BudgetCheck { round: round + 1 })?;
        Ok(())
    }

    /// Stops every running instance and closes the books.
    fn shutdown(&mut self, t: SimTime) -> Result<(), SimError> {
        self.done = true;
        for ticket in core::mem::take(&mut self.zone_tickets) {
            self.engine.cancel(ticket);
        }
        for c in clients(self.cfg.clients.len()) {
            self.cancel_prewarm(c);
            match self.market.live_instance(c).map(|i| i.state) {
                Some(InstanceState::Running) => {
                    self.stop_instance(c, t)?;
                    self.end_track(c, t)?;
                }
                // Still spinning up; stopped when ready.
                Some(_) => {}
                None => self.end_track(c, t)?,
            }
        }
        Ok(())
    }

    fn on_prewarm_due(&mut self, client: ClientId, t: SimTime) -> Result<(), SimError> {
        if self.gate.is_excluded(client) || self.done {
            self.prewarm.take(client);
            return Ok(());
        }
        let zones = self.candidate_zones(client);
        let fired = fire_prewarm(
            &mut self.prewarm,
            &mut self.engine,
            &mut self.market,
            client,
            zones,
            t,
            self.pricing,
        )?;
        if let Some(id) = fired {
            self.set_state(client, IntervalState::SpinUp, Some(id), t)?;
            if let Some(&idx) = self.open_prewarm.get(&client) {
                let rec = &mut self.prewarms[idx];
                rec.fired_at = Some(t);
                rec.instance = Some(id);
            }
        }
        Ok(())
    }

    fn on_preemption(&mut self, target: PreemptionTarget, t: SimTime) -> Result<(), SimError> {
        let victims: Vec<ClientId> = match &target {
            PreemptionTarget::Instance(id) => {
                let inst = self.market.instance(*id)?;
                if inst.state == InstanceState::Running {
                    alloc::vec![inst.client]
                } else {
                    Vec::new()
                }
            }
            PreemptionTarget::Zone(zone) => self
                .market
                .instances()
                .iter()
                .filter(|i| {
                    i.state == InstanceState::Running
                        && &i.zone == zone
                        && i.pricing_mode == PricingMode::Spot
                })
                .map(|i| i.client)
                .collect(),
        };
        if victims.is_empty() {
            warn!("preemption {target:?} at {t} hit no running instance");
        }
        for client in victims {
            self.preempt(client, t)?;
        }
        Ok(())
    }

    fn preempt(&mut self, client: ClientId, t: SimTime) -> Result<(), SimError> {
        let adjust = self.params.mode == PolicyMode::FedCostAware && self.estimates.is_calibrated();
        let original_slowest = if adjust && !self.round_clients.is_empty() {
            Some(estimate_slowest_finish_time(
                &self.round_clients,
                &self.estimates,
            )?)
        } else {
            None
        };
        // Close the training interval before the instance stops.
        self.close_track(client, t)?;
        let plan = self.workload.handle_preemption(
            &mut self.engine,
            &mut self.market,
            client,
            t,
            self.pricing,
        )?;
        let Some(plan) = plan else {
            self.decisions
                .push(Decision::PreemptionIgnored { at: t, client });
            if let Some(track) = self.tracks[client.0].as_mut() {
                track.since = t;
            }
            return Ok(());
        };
        let round = self.tracks[client.0]
            .map(|tr| tr.round)
            .unwrap_or(plan.round);
        self.tracks[client.0] = Some(Track {
            state: IntervalState::Recovery,
            since: t,
            round,
            instance: Some(plan.replacement),
        });
        self.fresh.remove(&client);
        if let Some(rc) = self.round_clients.iter_mut().find(|rc| rc.client == client) {
            rc.basis = FinishBasis::Known(plan.recovery_finish);
        }
        if let Some(original) = original_slowest {
            let adjustments = self.prewarm.adjust_for_preemption(
                &mut self.engine,
                plan.recovery_finish,
                original,
                &self.estimates,
                self.params.t_buffer,
            )?;
            for adjustment in adjustments {
                if let Some(&idx) = self.open_prewarm.get(&adjustment.client) {
                    let rec = &mut self.prewarms[idx];
                    rec.spin_up_start = adjustment.new_start;
                    rec.slowest_finish = original.max(plan.recovery_finish);
                }
                self.decisions.push(Decision::PrewarmAdjusted {
                    at: t,
                    original_slowest_finish: original,
                    recovery_finish: plan.recovery_finish,
                    adjustment,
                });
            }
        }
        self.decisions.push(Decision::Preempted { at: t, plan });
        Ok(())
    }

    fn finish(self) -> Result<RunOutcome, SimError> {
        let final_time = self.engine.now();
        if let Some(c) = self.tracks.iter().position(Option::is_some) {
            return Err(SimError::Invariant(format!(
                "timeline of client#{c} left open"
            )));
        }
        if let Some(inst) = self.market.instances().iter().find(|i| i.is_live()) {
            return Err(SimError::Invariant(format!(
                "instance {} still live at end of run",
                inst.id
            )));
        }
        let instance_accruals = self.market.total_accrued(final_time);
        let total = self.ledger.total_cost();
        if (total - instance_accruals).abs()
            > 1e-9 * total.abs().max(instance_accruals.abs()).max(1e-12)
        {
            return Err(SimError::Invariant(format!(
                "ledger total {total} disagrees with instance accruals {instance_accruals}"
            )));
        }
        let rounds_completed = self
            .records
            .iter()
            .filter(|r| r.barrier_at.is_some())
            .count() as u32;
        Ok(RunOutcome {
            mode: self.params.mode,
            params: self.params,
            rounds: self.cfg.rounds,
            rounds_completed,
            client_ids: self.cfg.clients.iter().map(|c| c.id.clone()).collect(),
            budgets: self.cfg.clients.iter().map(|c| c.budget).collect(),
            ledger: self.ledger,
            instances: self.market.instances().to_vec(),
            round_records: self.records,
            prewarms: self.prewarms,
            decisions: self.decisions,
            events: self.events,
            checkpoints: self.workload.checkpoint_log().to_vec(),
            estimates: self.estimates,
            gate: self.gate,
            final_time,
            instance_accruals,
        })
    }
}
