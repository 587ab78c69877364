//! Zones, spot/on-demand price traces, provisioning latency, preemption, and
//! per-second billing.
//!
//! An instance is billed from the moment it is requested until it stops: the
//! provisioning window is paid compute (boot, image pull, runtime start-up),
//! which is what pre-warming trades against idle time.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use thiserror::Error;

use crate::engine::{Engine, EngineError, Ticket};
use crate::event::{PreemptionTarget, SimEvent};
use crate::rng::{stream_rng, Stream};
use crate::time::SimTime;
use crate::{ClientId, InstanceId, SECS_PER_HOUR};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum MarketError {
    #[error("unknown zone `{0}`")]
    UnknownZone(String),
    #[error("zone `{0}` is defined more than once")]
    DuplicateZone(String),
    #[error("candidate zone set is empty")]
    EmptyCandidates,
    #[error("price trace for `{zone}`: {reason}")]
    InvalidTrace { zone: String, reason: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("{client} already has a live instance {instance}")]
    DoubleProvisioning {
        client: ClientId,
        instance: InstanceId,
    },
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("instance {instance} is {state:?}, expected {expected:?}")]
    BadState {
        instance: InstanceId,
        state: InstanceState,
        expected: InstanceState,
    },
    #[error("interval [{from}, {to}] is outside the billed window of {instance}")]
    OutsideWindow {
        instance: InstanceId,
        from: SimTime,
        to: SimTime,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PricingMode {
    Spot,
    OnDemand,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Zone {
    pub id: String,
    pub instance_type: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PricePoint {
    pub effective_from: f64,
    pub spot_price: f64,
}

/// A contiguous stretch of time billed at one hourly rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriceSegment {
    pub start: SimTime,
    pub end: SimTime,
    pub rate: f64,
}

impl PriceSegment {
    pub fn cost(&self) -> f64 {
        (self.end - self.start) / SECS_PER_HOUR * self.rate
    }
}

/// Piecewise-constant, left-inclusive spot price history plus a flat
/// on-demand price.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceTrace {
    zone: String,
    points: Vec<PricePoint>,
    on_demand_price: f64,
}

impl PriceTrace {
    pub fn new(
        zone: impl Into<String>,
        points: Vec<PricePoint>,
        on_demand_price: f64,
    ) -> Result<Self, MarketError> {
        let zone = zone.into();
        let bad = |reason: &str| MarketError::InvalidTrace {
            zone: zone.clone(),
            reason: reason.into(),
        };
        if points.is_empty() {
            return Err(bad("no price points"));
        }
        if points[0].effective_from != 0.0 {
            return Err(bad("first point must be effective from 0"));
        }
        if !(on_demand_price.is_finite() && on_demand_price > 0.0) {
            return Err(bad("on-demand price must be positive"));
        }
        for pair in points.windows(2) {
            if !(pair[1].effective_from > pair[0].effective_from) {
                return Err(bad("points must be strictly ascending in time"));
            }
        }
        for p in &points {
            if !p.effective_from.is_finite() {
                return Err(bad("non-finite breakpoint"));
            }
            if !(p.spot_price.is_finite() && p.spot_price > 0.0) {
                return Err(bad("spot prices must be positive"));
            }
            if p.spot_price > on_demand_price {
                return Err(bad("spot price exceeds on-demand price"));
            }
        }
        Ok(PriceTrace {
            zone,
            points,
            on_demand_price,
        })
    }

    pub fn flat(zone: impl Into<String>, spot: f64, on_demand: f64) -> Result<Self, MarketError> {
        Self::new(
            zone,
            alloc::vec![PricePoint {
                effective_from: 0.0,
                spot_price: spot,
            }],
            on_demand,
        )
    }

    pub fn zone(&self) -> &str {
        &self.zone
    }

    pub fn points(&self) -> &[PricePoint] {
        &self.points
    }

    pub fn on_demand_price(&self) -> f64 {
        self.on_demand_price
    }

    fn index_at(&self, t: f64) -> usize {
        self.points
            .partition_point(|p| p.effective_from <= t)
            .saturating_sub(1)
    }

    pub fn spot_at(&self, t: SimTime) -> f64 {
        self.points[self.index_at(t.secs())].spot_price
    }

    pub fn price_at(&self, t: SimTime, mode: PricingMode) -> f64 {
        match mode {
            PricingMode::Spot => self.spot_at(t),
            PricingMode::OnDemand => self.on_demand_price,
        }
    }

    /// Splits `[from, to]` at price breakpoints. A zero-length interval yields
    /// a single zero-length segment priced at `from`.
    pub fn segments(&self, from: SimTime, to: SimTime, mode: PricingMode) -> Vec<PriceSegment> {
        let mut out = Vec::new();
        if mode == PricingMode::OnDemand || to <= from {
            out.push(PriceSegment {
                start: from,
                end: to.max(from),
                rate: self.price_at(from, mode),
            });
            return out;
        }
        let mut idx = self.index_at(from.secs());
        let mut cursor = from;
        while cursor < to {
            let next_break = self
                .points
                .get(idx + 1)
                .map(|p| SimTime::from_secs(p.effective_from));
            let end = match next_break {
                Some(b) if b < to => b,
                _ => to,
            };
            out.push(PriceSegment {
                start: cursor,
                end,
                rate: self.points[idx].spot_price,
            });
            cursor = end;
            idx += 1;
        }
        out
    }

    pub fn cost(&self, from: SimTime, to: SimTime, mode: PricingMode) -> f64 {
        self.segments(from, to, mode)
            .iter()
            .map(PriceSegment::cost)
            .sum()
    }

    /// The same trace with every price multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, MarketError> {
        let points = self
            .points
            .iter()
            .map(|p| PricePoint {
                effective_from: p.effective_from,
                spot_price: p.spot_price * factor,
            })
            .collect();
        Self::new(self.zone.clone(), points, self.on_demand_price * factor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Jitter {
    #[default]
    None,
    /// Additive, uniform on `[-half_width, +half_width]`.
    Uniform { half_width: f64 },
    /// Additive log-normal draw with parameters of the underlying normal.
    #[cfg_attr(feature = "serde", serde(rename = "lognormal"))]
    LogNormal { mu: f64, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProvisioningModel {
    pub base_delay: f64,
    pub jitter: Jitter,
    pub seed: u64,
}

impl ProvisioningModel {
    pub fn fixed(base_delay: f64) -> Self {
        ProvisioningModel {
            base_delay,
            jitter: Jitter::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        if !(self.base_delay.is_finite() && self.base_delay > 0.0) {
            return Err(MarketError::InvalidModel(
                "provisioning base_delay must be positive".into(),
            ));
        }
        match self.jitter {
            Jitter::None => Ok(()),
            Jitter::Uniform { half_width } => {
                if half_width.is_finite() && half_width >= 0.0 && half_width < self.base_delay {
                    Ok(())
                } else {
                    Err(MarketError::InvalidModel(
                        "uniform jitter half_width must be in [0, base_delay)".into(),
                    ))
                }
            }
            Jitter::LogNormal { mu, sigma } => {
                if mu.is_finite() && sigma.is_finite() && sigma >= 0.0 {
                    Ok(())
                } else {
                    Err(MarketError::InvalidModel(
                        "lognormal jitter needs finite mu and sigma >= 0".into(),
                    ))
                }
            }
        }
    }

    /// Delay for the `ordinal`-th request issued for `client`. Always > 0.
    pub fn sample(&self, client: ClientId, ordinal: u64) -> f64 {
        let mut rng = stream_rng(self.seed, Stream::Provisioning, client.0 as u64, ordinal);
        let extra = match self.jitter {
            Jitter::None => 0.0,
            Jitter::Uniform { half_width } if half_width > 0.0 => {
                rng.random_range(-half_width..=half_width)
            }
            Jitter::Uniform { .. } => 0.0,
            Jitter::LogNormal { mu, sigma } => match LogNormal::new(mu, sigma) {
                Ok(d) => d.sample(&mut rng),
                Err(_) => 0.0,
            },
        };
        let delay = self.base_delay + extra;
        if delay > 0.0 {
            delay
        } else {
            f64::MIN_POSITIVE
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PreemptionTraceEntry {
    pub zone: String,
    pub fire_at: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub enum PreemptionKind {
    #[default]
    None,
    Poisson {
        rate_per_hour: f64,
    },
    Trace(Vec<PreemptionTraceEntry>),
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PreemptionModel {
    pub kind: PreemptionKind,
    pub seed: u64,
}

impl PreemptionModel {
    pub fn none() -> Self {
        PreemptionModel::default()
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        match &self.kind {
            PreemptionKind::None => Ok(()),
            PreemptionKind::Poisson { rate_per_hour } => {
                if rate_per_hour.is_finite() && *rate_per_hour >= 0.0 {
                    Ok(())
                } else {
                    Err(MarketError::InvalidModel(
                        "poisson preemption rate must be finite and >= 0".into(),
                    ))
                }
            }
            PreemptionKind::Trace(entries) => {
                if entries
                    .iter()
                    .all(|e| e.fire_at.is_finite() && e.fire_at >= 0.0)
                {
                    Ok(())
                } else {
                    Err(MarketError::InvalidModel(
                        "preemption trace times must be finite and >= 0".into(),
                    ))
                }
            }
        }
    }

    /// Pre-sampled preemption time for a Poisson model, measured from the
    /// instance becoming ready.
    pub fn sample_after(&self, instance: InstanceId, ready_at: SimTime) -> Option<SimTime> {
        let PreemptionKind::Poisson { rate_per_hour } = self.kind else {
            return None;
        };
        if rate_per_hour <= 0.0 {
            return None;
        }
        let exp = Exp::new(rate_per_hour / SECS_PER_HOUR).ok()?;
        let mut rng = stream_rng(self.seed, Stream::Preemption, instance.0, 0);
        Some(ready_at + exp.sample(&mut rng))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InstanceState {
    Requested,
    Running,
    Terminated,
    Preempted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceHandle {
    pub id: InstanceId,
    pub client: ClientId,
    pub zone: String,
    pub state: InstanceState,
    pub pricing_mode: PricingMode,
    pub requested_at: SimTime,
    /// Moment the instance became ready to train.
    pub running_at: Option<SimTime>,
    pub stopped_at: Option<SimTime>,
    pub provisioning_delay: f64,
    ready_ticket: Option<Ticket>,
    preemption_ticket: Option<Ticket>,
}

impl InstanceHandle {
    pub fn ready_at(&self) -> SimTime {
        self.requested_at + self.provisioning_delay
    }

    pub fn is_live(&self) -> bool {
        matches!(
            self.state,
            InstanceState::Requested | InstanceState::Running
        )
    }

    pub fn preemption_ticket(&self) -> Option<Ticket> {
        self.preemption_ticket
    }
}

/// What an instance cost over its whole billed window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilledWindow {
    pub instance: InstanceId,
    pub from: SimTime,
    pub to: SimTime,
    pub cost: f64,
}

#[derive(Clone, Debug)]
pub struct Market {
    zones: Vec<Zone>,
    traces: BTreeMap<String, PriceTrace>,
    provisioning: ProvisioningModel,
    preemption: PreemptionModel,
    instances: Vec<InstanceHandle>,
    live: BTreeMap<ClientId, InstanceId>,
    request_counts: BTreeMap<ClientId, u64>,
}

impl Market {
    pub fn new(
        zones: Vec<(Zone, PriceTrace)>,
        provisioning: ProvisioningModel,
        preemption: PreemptionModel,
    ) -> Result<Self, MarketError> {
        provisioning.validate()?;
        preemption.validate()?;
        let mut traces = BTreeMap::new();
        let mut zone_list = Vec::with_capacity(zones.len());
        for (zone, trace) in zones {
            if trace.zone() != zone.id {
                return Err(MarketError::InvalidTrace {
                    zone: zone.id,
                    reason: "trace belongs to a different zone".into(),
                });
            }
            if traces.insert(zone.id.clone(), trace).is_some() {
                return Err(MarketError::DuplicateZone(zone.id));
            }
            zone_list.push(zone);
        }
        if let PreemptionKind::Trace(entries) = &preemption.kind {
            if let Some(e) = entries.iter().find(|e| !traces.contains_key(&e.zone)) {
                return Err(MarketError::UnknownZone(e.zone.clone()));
            }
        }
        Ok(Market {
            zones: zone_list,
            traces,
            provisioning,
            preemption,
            instances: Vec::new(),
            live: BTreeMap::new(),
            request_counts: BTreeMap::new(),
        })
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn has_zone(&self, zone: &str) -> bool {
        self.traces.contains_key(zone)
    }

    pub fn trace(&self, zone: &str) -> Result<&PriceTrace, MarketError> {
        self.traces
            .get(zone)
            .ok_or_else(|| MarketError::UnknownZone(zone.into()))
    }

    pub fn provisioning(&self) -> &ProvisioningModel {
        &self.provisioning
    }

    pub fn preemption(&self) -> &PreemptionModel {
        &self.preemption
    }

    pub fn price_at(&self, zone: &str, t: SimTime, mode: PricingMode) -> Result<f64, MarketError> {
        Ok(self.trace(zone)?.price_at(t, mode))
    }

    /// Zone with the lowest spot price at `t`; ties go to the
    /// lexicographically smallest id.
    pub fn cheapest_zone<'a, I>(&self, t: SimTime, candidates: I) -> Result<&str, MarketError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut best: Option<(&str, f64)> = None;
        for zone in candidates {
            let (key, trace) = self
                .traces
                .get_key_value(zone)
                .ok_or_else(|| MarketError::UnknownZone(zone.into()))?;
            let price = trace.spot_at(t);
            best = match best {
                None => Some((key.as_str(), price)),
                Some((bz, bp)) => {
                    if price < bp || (price == bp && key.as_str() < bz) {
                        Some((key.as_str(), price))
                    } else {
                        Some((bz, bp))
                    }
                }
            };
        }
        best.map(|(z, _)| z).ok_or(MarketError::EmptyCandidates)
    }

    pub fn instances(&self) -> &[InstanceHandle] {
        &self.instances
    }

    pub fn instance(&self, id: InstanceId) -> Result<&InstanceHandle, MarketError> {
        self.instances
            .get(id.0 as usize)
            .ok_or(MarketError::UnknownInstance(id))
    }

    fn instance_mut(&mut self, id: InstanceId) -> Result<&mut InstanceHandle, MarketError> {
        self.instances
            .get_mut(id.0 as usize)
            .ok_or(MarketError::UnknownInstance(id))
    }

    pub fn live_instance(&self, client: ClientId) -> Option<&InstanceHandle> {
        self.live
            .get(&client)
            .and_then(|id| self.instances.get(id.0 as usize))
    }

    /// Requests a fresh instance. Schedules `InstanceReady` after a sampled
    /// provisioning delay and, under a Poisson preemption model on spot,
    /// a pre-sampled `Preemption` for the instance.
    pub fn request_instance(
        &mut self,
        engine: &mut Engine<SimEvent>,
        client: ClientId,
        zone: &str,
        t: SimTime,
        mode: PricingMode,
    ) -> Result<InstanceId, MarketError> {
        if let Some(&existing) = self.live.get(&client) {
            return Err(MarketError::DoubleProvisioning {
                client,
                instance: existing,
            });
        }
        if !self.traces.contains_key(zone) {
            return Err(MarketError::UnknownZone(zone.into()));
        }
        let ordinal = self.request_counts.entry(client).or_insert(0);
        let delay = self.provisioning.sample(client, *ordinal);
        *ordinal += 1;

        let id = InstanceId(self.instances.len() as u64);
        let ready_at = t + delay;
        let ready_ticket = engine.schedule(
            ready_at,
            SimEvent::InstanceReady {
                client,
                instance: id,
            },
        )?;
        let preemption_ticket = match mode {
            PricingMode::Spot => match self.preemption.sample_after(id, ready_at) {
                Some(at) => Some(
                    engine.schedule(at, SimEvent::Preemption(PreemptionTarget::Instance(id)))?,
                ),
                None => None,
            },
            PricingMode::OnDemand => None,
        };
        self.instances.push(InstanceHandle {
            id,
            client,
            zone: zone.into(),
            state: InstanceState::Requested,
            pricing_mode: mode,
            requested_at: t,
            running_at: None,
            stopped_at: None,
            provisioning_delay: delay,
            ready_ticket: Some(ready_ticket),
            preemption_ticket,
        });
        self.live.insert(client, id);
        Ok(id)
    }

    pub fn mark_ready(&mut self, id: InstanceId, t: SimTime) -> Result<(), MarketError> {
        let inst = self.instance_mut(id)?;
        if inst.state != InstanceState::Requested {
            return Err(MarketError::BadState {
                instance: id,
                state: inst.state,
                expected: InstanceState::Requested,
            });
        }
        inst.state = InstanceState::Running;
        inst.running_at = Some(t);
        inst.ready_ticket = None;
        Ok(())
    }

    fn stop(
        &mut self,
        engine: &mut Engine<SimEvent>,
        id: InstanceId,
        t: SimTime,
        new_state: InstanceState,
    ) -> Result<BilledWindow, MarketError> {
        let inst = self.instance_mut(id)?;
        if inst.state != InstanceState::Running {
            return Err(MarketError::BadState {
                instance: id,
                state: inst.state,
                expected: InstanceState::Running,
            });
        }
        inst.state = new_state;
        inst.stopped_at = Some(t);
        if let Some(ticket) = inst.preemption_ticket.take() {
            engine.cancel(ticket);
        }
        let client = inst.client;
        let from = inst.requested_at;
        self.live.remove(&client);
        let cost = self.accrue_cost(id, from, t, t)?;
        Ok(BilledWindow {
            instance: id,
            from,
            to: t,
            cost,
        })
    }

    /// Stops a running instance at `t` and cancels its pending preemption.
    pub fn terminate_instance(
        &mut self,
        engine: &mut Engine<SimEvent>,
        id: InstanceId,
        t: SimTime,
    ) -> Result<BilledWindow, MarketError> {
        self.stop(engine, id, t, InstanceState::Terminated)
    }

    /// Provider-side reclaim of a running instance.
    pub fn preempt_instance(
        &mut self,
        engine: &mut Engine<SimEvent>,
        id: InstanceId,
        t: SimTime,
    ) -> Result<BilledWindow, MarketError> {
        self.stop(engine, id, t, InstanceState::Preempted)
    }

    /// Cost of `[from, to]` for one instance, prorated per second across price
    /// breakpoints. `now` bounds the window of an instance that is still live.
    pub fn accrue_cost(
        &self,
        id: InstanceId,
        from: SimTime,
        to: SimTime,
        now: SimTime,
    ) -> Result<f64, MarketError> {
        let inst = self.instance(id)?;
        let window_end = inst.stopped_at.unwrap_or(now);
        if !(from <= to && from >= inst.requested_at && to <= window_end) {
            return Err(MarketError::OutsideWindow {
                instance: id,
                from,
                to,
            });
        }
        Ok(self.trace(&inst.zone)?.cost(from, to, inst.pricing_mode))
    }

    /// Billing segments for part of an instance's window, split at price
    /// breakpoints.
    pub fn billing_segments(
        &self,
        id: InstanceId,
        from: SimTime,
        to: SimTime,
    ) -> Result<Vec<PriceSegment>, MarketError> {
        let inst = self.instance(id)?;
        Ok(self
            .trace(&inst.zone)?
            .segments(from, to, inst.pricing_mode))
    }

    /// Sum of every instance's cost over its billed window, with live
    /// instances billed up to `now`.
    pub fn total_accrued(&self, now: SimTime) -> f64 {
        self.instances
            .iter()
            .map(|inst| {
                let end = inst.stopped_at.unwrap_or(now);
                self.accrue_cost(inst.id, inst.requested_at, end, now)
                    .unwrap_or(0.0)
            })
            .sum()
    }
}
