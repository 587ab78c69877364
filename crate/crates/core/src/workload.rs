//! Synchronous FL workload: per-client epoch timing with cold/warm durations,
//! the round barrier, periodic checkpoints, and resume after preemption.
//!
//! Epoch progress is measured in "work units": seconds of the epoch as it was
//! originally sized. A resumed epoch keeps those units but may run at a
//! different wall-clock rate (cold start on the replacement instance).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::engine::{Engine, EngineError, Ticket};
use crate::event::SimEvent;
use crate::market::{InstanceState, Market, MarketError, PricingMode};
use crate::rng::{stream_rng, Stream};
use crate::time::SimTime;
use crate::{ClientId, InstanceId};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum WorkloadError {
    #[error("client profile `{id}`: {reason}")]
    InvalidProfile { id: String, reason: String },
    #[error("{client} is not a participant of round {round}")]
    NotParticipant { client: ClientId, round: u32 },
    #[error("{client} already reported for round {round}")]
    AlreadyFinished { client: ClientId, round: u32 },
    #[error("{client} is already training")]
    AlreadyTraining { client: ClientId },
    #[error("{client} is not training in round {round}")]
    NotTraining { client: ClientId, round: u32 },
    #[error("{client} has no running instance")]
    InstanceNotRunning { client: ClientId },
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Multiplicative noise on epoch durations, mean 1.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Noise {
    #[default]
    None,
    /// Factor drawn uniformly from `[1 - half_width, 1 + half_width]`.
    Uniform { half_width: f64 },
    /// Factor `exp(sigma * Z - sigma^2 / 2)`.
    #[cfg_attr(feature = "serde", serde(rename = "lognormal"))]
    LogNormal { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ClientProfile {
    pub id: String,
    /// Ground-truth duration of the first epoch on a fresh instance.
    pub epoch_cold: f64,
    /// Ground-truth duration of an epoch on an instance that already trained.
    pub epoch_warm: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub noise: Noise,
    /// `None` means unlimited.
    #[cfg_attr(feature = "serde", serde(default))]
    pub budget: Option<f64>,
    pub checkpoint_interval: f64,
    pub candidate_zones: Vec<String>,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |reason: &str| {
            Err(WorkloadError::InvalidProfile {
                id: self.id.clone(),
                reason: reason.into(),
            })
        };
        if !(self.epoch_warm.is_finite() && self.epoch_warm > 0.0) {
            return bad("epoch_warm must be positive");
        }
        if !(self.epoch_cold.is_finite() && self.epoch_cold >= self.epoch_warm) {
            return bad("epoch_cold must be >= epoch_warm");
        }
        if let Some(b) = self.budget {
            if !(b >= 0.0) || b.is_nan() {
                return bad("budget must be >= 0");
            }
        }
        if !(self.checkpoint_interval.is_finite() && self.checkpoint_interval > 0.0) {
            return bad("checkpoint_interval must be positive");
        }
        if self.candidate_zones.is_empty() {
            return bad("candidate_zones must not be empty");
        }
        match self.noise {
            Noise::None => {}
            Noise::Uniform { half_width } => {
                if !(half_width.is_finite() && (0.0..1.0).contains(&half_width)) {
                    return bad("uniform noise half_width must be in [0, 1)");
                }
            }
            Noise::LogNormal { sigma } => {
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return bad("lognormal noise sigma must be >= 0");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StartKind {
    Cold,
    Warm,
}

/// One noise factor per (client, round), shared by the cold and warm
/// durations so `cold >= warm` holds in every round.
pub fn noise_factor(noise: Noise, seed: u64, client: ClientId, round: u32) -> f64 {
    let mut rng = stream_rng(seed, Stream::EpochNoise, client.0 as u64, round as u64);
    match noise {
        Noise::None => 1.0,
        Noise::Uniform { half_width } if half_width > 0.0 => {
            1.0 + rng.random_range(-half_width..=half_width)
        }
        Noise::Uniform { .. } => 1.0,
        Noise::LogNormal { sigma } => {
            let z: f64 = StandardNormal.sample(&mut rng);
            libm::exp(sigma * z - 0.5 * sigma * sigma)
        }
    }
}

pub fn epoch_duration(
    profile: &ClientProfile,
    client: ClientId,
    kind: StartKind,
    round: u32,
    seed: u64,
) -> f64 {
    let base = match kind {
        StartKind::Cold => profile.epoch_cold,
        StartKind::Warm => profile.epoch_warm,
    };
    base * noise_factor(profile.noise, seed, client, round)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub client: ClientId,
    pub round: u32,
    /// Work units completed at the checkpoint.
    pub progress: f64,
    pub saved_at: SimTime,
}

/// What a preemption cost in epoch progress.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreemptionLoss {
    pub progress: f64,
    pub resume_from: f64,
    pub lost_work: f64,
}

/// An epoch in flight for one client.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRun {
    pub client: ClientId,
    pub round: u32,
    pub kind: StartKind,
    /// Total work units (the epoch's wall duration at its original speed).
    pub work: f64,
    pub checkpoint_interval: f64,
    pub started_at: SimTime,
    base_progress: f64,
    segment_start: SimTime,
    /// Work units per wall-clock second in the current segment.
    rate: f64,
    /// Set while the client waits for a replacement instance.
    paused: Option<f64>,
    pub preemptions: u32,
    /// Wall time spent waiting for replacement instances.
    pub stalled: f64,
    ticket: Option<Ticket>,
}

impl EpochRun {
    pub fn new(
        client: ClientId,
        round: u32,
        kind: StartKind,
        start: SimTime,
        duration: f64,
        checkpoint_interval: f64,
    ) -> Self {
        EpochRun {
            client,
            round,
            kind,
            work: duration,
            checkpoint_interval,
            started_at: start,
            base_progress: 0.0,
            segment_start: start,
            rate: 1.0,
            paused: None,
            preemptions: 0,
            stalled: 0.0,
            ticket: None,
        }
    }

    pub fn is_paused(&self) -> bool {
        self.paused.is_some()
    }

    pub fn resume_from(&self) -> f64 {
        self.base_progress
    }

    pub fn finish_time(&self) -> SimTime {
        self.segment_start + (self.work - self.base_progress) / self.rate
    }

    pub fn progress_at(&self, t: SimTime) -> f64 {
        let p = self.base_progress + (t - self.segment_start) * self.rate;
        p.clamp(self.base_progress, self.work)
    }

    fn checkpoint_time(&self, progress: f64) -> SimTime {
        self.segment_start + (progress - self.base_progress) / self.rate
    }

    /// Checkpoints the current segment will write: every
    /// `checkpoint_interval` of progress, plus the epoch end.
    pub fn checkpoints(&self) -> Vec<CheckpointRecord> {
        let mut out = Vec::new();
        let interval = self.checkpoint_interval;
        let mut k = libm::floor(self.base_progress / interval) + 1.0;
        loop {
            let progress = k * interval;
            if progress >= self.work {
                break;
            }
            out.push(CheckpointRecord {
                client: self.client,
                round: self.round,
                progress,
                saved_at: self.checkpoint_time(progress),
            });
            k += 1.0;
        }
        out.push(CheckpointRecord {
            client: self.client,
            round: self.round,
            progress: self.work,
            saved_at: self.finish_time(),
        });
        out
    }

    /// Latest checkpointed progress at or before `t`.
    pub fn last_checkpoint(&self, t: SimTime) -> f64 {
        let interval = self.checkpoint_interval;
        let progress = self.progress_at(t);
        let mut k = libm::floor(progress / interval);
        if (k + 1.0) * interval <= self.work && self.checkpoint_time((k + 1.0) * interval) <= t {
            k += 1.0;
        } else if k * interval > self.base_progress && self.checkpoint_time(k * interval) > t {
            k -= 1.0;
        }
        (k * interval).max(self.base_progress).min(self.work)
    }

    /// Stops the segment at `t` and rolls back to the last checkpoint.
    pub fn interrupt(&mut self, t: SimTime) -> PreemptionLoss {
        let progress = self.progress_at(t);
        let resume_from = self.last_checkpoint(t);
        self.base_progress = resume_from;
        self.segment_start = t;
        self.preemptions += 1;
        PreemptionLoss {
            progress,
            resume_from,
            lost_work: (progress - resume_from).max(0.0),
        }
    }

    /// Continues from the last checkpoint; the remaining work takes
    /// `remaining_wall` seconds.
    pub fn resume(&mut self, t: SimTime, remaining_wall: f64) {
        let remaining = self.work - self.base_progress;
        self.stalled += t - self.segment_start;
        self.segment_start = t;
        self.rate = if remaining_wall > 0.0 {
            remaining / remaining_wall
        } else {
            1.0
        };
        self.paused = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BarrierStatus {
    Pending { remaining: usize },
    Complete { at: SimTime },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    pub index: u32,
    pub started_at: SimTime,
    pub participants: BTreeSet<ClientId>,
    pub finished: BTreeMap<ClientId, SimTime>,
    pub barrier_complete_at: Option<SimTime>,
}

impl RoundState {
    pub fn new(index: u32, started_at: SimTime, participants: BTreeSet<ClientId>) -> Self {
        RoundState {
            index,
            started_at,
            participants,
            finished: BTreeMap::new(),
            barrier_complete_at: None,
        }
    }

    pub fn record_finish(
        &mut self,
        client: ClientId,
        t: SimTime,
    ) -> Result<BarrierStatus, WorkloadError> {
        if !self.participants.contains(&client) {
            return Err(WorkloadError::NotParticipant {
                client,
                round: self.index,
            });
        }
        if self.finished.insert(client, t).is_some() {
            return Err(WorkloadError::AlreadyFinished {
                client,
                round: self.index,
            });
        }
        let remaining = self.participants.len() - self.finished.len();
        if remaining == 0 {
            let at = self
                .finished
                .values()
                .copied()
                .fold(SimTime::ZERO, SimTime::max);
            self.barrier_complete_at = Some(at);
            Ok(BarrierStatus::Complete { at })
        } else {
            Ok(BarrierStatus::Pending { remaining })
        }
    }

    pub fn is_pending(&self, client: ClientId) -> bool {
        self.participants.contains(&client) && !self.finished.contains_key(&client)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct WorkloadParams {
    /// Resumed work runs this much slower than a plain cold epoch.
    pub resume_overhead: f64,
    /// Constant model download/upload time added to every training task.
    pub transfer_latency: f64,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        WorkloadParams {
            resume_overhead: 1.0,
            transfer_latency: 0.0,
        }
    }
}

/// Result of a preemption while training.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryPlan {
    pub client: ClientId,
    pub round: u32,
    pub preempted: InstanceId,
    pub replacement: InstanceId,
    pub preempted_at: SimTime,
    pub loss: PreemptionLoss,
    pub ready_at: SimTime,
    pub remaining_duration: f64,
    pub recovery_finish: SimTime,
}

#[derive(Clone, Debug)]
pub struct Workload {
    profiles: Vec<ClientProfile>,
    params: WorkloadParams,
    seed: u64,
    runs: BTreeMap<ClientId, EpochRun>,
    checkpoints: Vec<CheckpointRecord>,
}

impl Workload {
    pub fn new(
        profiles: Vec<ClientProfile>,
        params: WorkloadParams,
        seed: u64,
    ) -> Result<Self, WorkloadError> {
        for p in &profiles {
            p.validate()?;
        }
        Ok(Workload {
            profiles,
            params,
            seed,
            runs: BTreeMap::new(),
            checkpoints: Vec::new(),
        })
    }

    pub fn profiles(&self) -> &[ClientProfile] {
        &self.profiles
    }

    pub fn profile(&self, client: ClientId) -> Result<&ClientProfile, WorkloadError> {
        self.profiles
            .get(client.0)
            .ok_or(WorkloadError::UnknownClient(client))
    }

    pub fn params(&self) -> WorkloadParams {
        self.params
    }

    /// Wall duration of one training task: the epoch plus transfer latency.
    pub fn task_duration(
        &self,
        client: ClientId,
        kind: StartKind,
        round: u32,
    ) -> Result<f64, WorkloadError> {
        let profile = self.profile(client)?;
        Ok(epoch_duration(profile, client, kind, round, self.seed) + self.params.transfer_latency)
    }

    pub fn run(&self, client: ClientId) -> Option<&EpochRun> {
        self.runs.get(&client)
    }

    pub fn is_training(&self, client: ClientId) -> bool {
        self.runs.get(&client).is_some_and(|r| !r.is_paused())
    }

    pub fn awaiting_recovery(&self, client: ClientId) -> bool {
        self.runs.get(&client).is_some_and(EpochRun::is_paused)
    }

    /// Checkpoints written by completed epoch segments, in completion order.
    pub fn checkpoint_log(&self) -> &[CheckpointRecord] {
        &self.checkpoints
    }

    /// Starts one epoch on the client's running instance and schedules its
    /// completion.
    pub fn start_epoch(
        &mut self,
        engine: &mut Engine<SimEvent>,
        market: &Market,
        round: &RoundState,
        client: ClientId,
        t: SimTime,
        kind: StartKind,
    ) -> Result<&EpochRun, WorkloadError> {
        if !round.is_pending(client) {
            return Err(WorkloadError::NotParticipant {
                client,
                round: round.index,
            });
        }
        if self.runs.contains_key(&client) {
            return Err(WorkloadError::AlreadyTraining { client });
        }
        match market.live_instance(client) {
            Some(inst) if inst.state == InstanceState::Running => {}
            _ => return Err(WorkloadError::InstanceNotRunning { client }),
        }
        let duration = self.task_duration(client, kind, round.index)?;
        let interval = self.profile(client)?.checkpoint_interval;
        let mut run = EpochRun::new(client, round.index, kind, t, duration, interval);
        let ticket = engine.schedule(
            run.finish_time(),
            SimEvent::EpochComplete {
                client,
                round: round.index,
            },
        )?;
        run.ticket = Some(ticket);
        Ok(self.runs.entry(client).or_insert(run))
    }

    /// Records the client's finish and reports whether the barrier is done.
    pub fn on_epoch_complete(
        &mut self,
        round: &mut RoundState,
        client: ClientId,
        t: SimTime,
    ) -> Result<(EpochRun, BarrierStatus), WorkloadError> {
        let run = match self.runs.get(&client) {
            Some(run) if run.round == round.index && !run.is_paused() => run,
            _ => {
                return Err(WorkloadError::NotTraining {
                    client,
                    round: round.index,
                })
            }
        };
        self.checkpoints.extend(run.checkpoints());
        let status = round.record_finish(client, t)?;
        let run = self.runs.remove(&client).expect("checked above");
        Ok((run, status))
    }

    /// Drops an in-flight epoch without recording it (client excluded).
    pub fn abandon(&mut self, engine: &mut Engine<SimEvent>, client: ClientId) -> Option<EpochRun> {
        let run = self.runs.remove(&client)?;
        if let Some(ticket) = run.ticket {
            engine.cancel(ticket);
        }
        Some(run)
    }

    /// Reclaims the client's instance mid-epoch: rolls back to the last
    /// checkpoint, requests a replacement in the cheapest candidate zone, and
    /// predicts when the resumed epoch will finish. Returns `None` (with a
    /// warning) when the client is not training on a running instance.
    pub fn handle_preemption(
        &mut self,
        engine: &mut Engine<SimEvent>,
        market: &mut Market,
        client: ClientId,
        t: SimTime,
        mode: PricingMode,
    ) -> Result<Option<RecoveryPlan>, WorkloadError> {
        let instance = match market.live_instance(client) {
            Some(inst) if inst.state == InstanceState::Running => inst.id,
            _ => {
                warn!("preemption for {client} at {t} ignored: no running instance");
                return Ok(None);
            }
        };
        if !self.is_training(client) {
            warn!("preemption for {client} at {t} ignored: instance is not training");
            return Ok(None);
        }
        market.preempt_instance(engine, instance, t)?;

        let run = self.runs.get_mut(&client).expect("training checked");
        if let Some(ticket) = run.ticket.take() {
            engine.cancel(ticket);
        }
        let round = run.round;
        let written: Vec<CheckpointRecord> = run
            .checkpoints()
            .into_iter()
            .filter(|c| c.saved_at <= t)
            .collect();
        let loss = run.interrupt(t);
        self.checkpoints.extend(
            written
                .into_iter()
                .filter(|c| c.progress <= loss.resume_from),
        );
        let profile = &self.profiles[client.0];

        let cold_task = epoch_duration(profile, client, StartKind::Cold, round, self.seed)
            + self.params.transfer_latency;
        let remaining_fraction = (run.work - loss.resume_from) / run.work;
        let remaining_duration = remaining_fraction * cold_task * self.params.resume_overhead;
        run.paused = Some(remaining_duration);

        let zone: String = market
            .cheapest_zone(t, profile.candidate_zones.iter().map(String::as_str))?
            .into();
        let replacement = market.request_instance(engine, client, &zone, t, mode)?;
        let ready_at = market.instance(replacement)?.ready_at();
        Ok(Some(RecoveryPlan {
            client,
            round,
            preempted: instance,
            replacement,
            preempted_at: t,
            loss,
            ready_at,
            remaining_duration,
            recovery_finish: ready_at + remaining_duration,
        }))
    }

    /// Continues a paused epoch once the replacement instance is ready.
    pub fn resume_after_recovery(
        &mut self,
        engine: &mut Engine<SimEvent>,
        client: ClientId,
        t: SimTime,
    ) -> Result<SimTime, WorkloadError> {
        let run = self
            .runs
            .get_mut(&client)
            .filter(|r| r.is_paused())
            .ok_or(WorkloadError::NotTraining { client, round: 0 })?;
        let remaining = run.paused.unwrap_or(0.0);
        run.resume(t, remaining);
        let finish = run.finish_time();
        run.ticket = Some(engine.schedule(
            finish,
            SimEvent::EpochComplete {
                client,
                round: run.round,
            },
        )?);
        Ok(finish)
    }
}
