//! Experiment description: clients, market, policy, rounds and seed.
//!
//! The config is plain data so it can come from any serde format. External
//! price and preemption trace files are referenced by path and must be
//! resolved into inline data (by the IO layer) before validation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::market::{
    Jitter, Market, PreemptionKind, PreemptionModel, PreemptionTraceEntry, PricePoint, PriceTrace,
    PricingMode, ProvisioningModel, Zone,
};
use crate::scheduler::{PolicyMode, PolicyParams};
use crate::workload::{ClientProfile, Workload, WorkloadParams};

/// A validation failure, located by a dotted field path.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl ToString) -> Self {
        ConfigError {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ZoneConfig {
    pub id: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub instance_type: String,
    pub on_demand_price: f64,
    /// Shorthand for a flat spot price.
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub spot_price: Option<f64>,
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Vec::is_empty")
    )]
    pub spot_prices: Vec<PricePoint>,
    /// CSV with `effective_from,spot_price` rows, relative to the config.
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub spot_price_file: Option<String>,
}

impl ZoneConfig {
    pub fn flat(id: impl Into<String>, spot: f64, on_demand: f64) -> Self {
        ZoneConfig {
            id: id.into(),
            instance_type: String::new(),
            on_demand_price: on_demand,
            spot_price: Some(spot),
            spot_prices: Vec::new(),
            spot_price_file: None,
        }
    }

    pub fn price_trace(&self) -> Result<PriceTrace, ConfigError> {
        let sources = usize::from(self.spot_price.is_some())
            + usize::from(!self.spot_prices.is_empty())
            + usize::from(self.spot_price_file.is_some());
        if self.spot_price_file.is_some() {
            return Err(ConfigError::new(
                "spot_price_file",
                "price file was not loaded",
            ));
        }
        if sources != 1 {
            return Err(ConfigError::new(
                "spot_prices",
                "exactly one of spot_price, spot_prices, spot_price_file is required",
            ));
        }
        let trace = match self.spot_price {
            Some(p) => PriceTrace::flat(self.id.clone(), p, self.on_demand_price),
            None => PriceTrace::new(
                self.id.clone(),
                self.spot_prices.clone(),
                self.on_demand_price,
            ),
        };
        trace.map_err(|e| ConfigError::new("spot_prices", e))
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MarketConfig {
    pub zones: Vec<ZoneConfig>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ProvisioningConfig {
    /// Mean spin-up delay in seconds.
    pub base_delay: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub jitter: Jitter,
}

#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum PreemptionConfig {
    #[default]
    None,
    Poisson {
        rate_per_hour: f64,
    },
    Trace {
        #[cfg_attr(feature = "serde", serde(default))]
        events: Vec<PreemptionTraceEntry>,
        /// CSV with `zone,fire_at` rows, relative to the config.
        #[cfg_attr(
            feature = "serde",
            serde(default, skip_serializing_if = "Option::is_none")
        )]
        file: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ScenarioConfig {
    pub name: String,
    /// Synchronous rounds; one local epoch per client per round.
    pub rounds: u32,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
    pub clients: Vec<ClientProfile>,
    pub market: MarketConfig,
    pub provisioning: ProvisioningConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub preemption: PreemptionConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub policy: PolicyParams,
    #[cfg_attr(feature = "serde", serde(default))]
    pub workload: WorkloadParams,
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub outputs: Option<String>,
    /// Runaway-loop guard; defaults to the engine's cap.
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub event_cap: Option<u64>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(ConfigError::new("name", "must not be empty"));
        }
        if self.rounds == 0 {
            return Err(ConfigError::new("rounds", "must be at least 1"));
        }
        if self.policy.mode == PolicyMode::FedCostAware && self.rounds < 3 {
            return Err(ConfigError::new(
                "rounds",
                format!(
                    "fedcostaware needs at least 3 rounds (2 calibration + 1 optimized), got {}",
                    self.rounds
                ),
            ));
        }
        self.policy
            .validate()
            .map_err(|e| ConfigError::new("policy", e))?;

        if self.market.zones.is_empty() {
            return Err(ConfigError::new(
                "market.zones",
                "at least one zone is required",
            ));
        }
        for (i, zone) in self.market.zones.iter().enumerate() {
            let path = format!("market.zones[{i}]");
            if zone.id.is_empty() {
                return Err(ConfigError::new(format!("{path}.id"), "must not be empty"));
            }
            if self.market.zones[..i].iter().any(|z| z.id == zone.id) {
                return Err(ConfigError::new(
                    format!("{path}.id"),
                    format!("duplicate zone `{}`", zone.id),
                ));
            }
            zone.price_trace()
                .map_err(|e| ConfigError::new(format!("{path}.{}", e.path), e.message))?;
        }

        if self.clients.is_empty() {
            return Err(ConfigError::new(
                "clients",
                "at least one client is required",
            ));
        }
        for (i, client) in self.clients.iter().enumerate() {
            let path = format!("clients[{i}]");
            if self.clients[..i].iter().any(|c| c.id == client.id) {
                return Err(ConfigError::new(
                    format!("{path}.id"),
                    format!("duplicate client `{}`", client.id),
                ));
            }
            client
                .validate()
                .map_err(|e| ConfigError::new(path.clone(), e))?;
            for (j, z) in client.candidate_zones.iter().enumerate() {
                if !self.market.zones.iter().any(|zone| &zone.id == z) {
                    return Err(ConfigError::new(
                        format!("{path}.candidate_zones[{j}]"),
                        format!("unknown zone `{z}`"),
                    ));
                }
            }
        }

        self.provisioning_model()
            .validate()
            .map_err(|e| ConfigError::new("provisioning", e))?;
        match &self.preemption {
            PreemptionConfig::Trace { file: Some(_), .. } => {
                return Err(ConfigError::new(
                    "preemption.file",
                    "trace file was not loaded",
                ));
            }
            PreemptionConfig::Trace { events, .. } => {
                for (i, e) in events.iter().enumerate() {
                    if !self.market.zones.iter().any(|z| z.id == e.zone) {
                        return Err(ConfigError::new(
                            format!("preemption.events[{i}].zone"),
                            format!("unknown zone `{}`", e.zone),
                        ));
                    }
                }
            }
            _ => {}
        }
        self.preemption_model(PolicyMode::PlainSpot)
            .validate()
            .map_err(|e| ConfigError::new("preemption", e))?;

        let w = self.workload;
        if !(w.resume_overhead.is_finite() && w.resume_overhead > 0.0) {
            return Err(ConfigError::new(
                "workload.resume_overhead",
                "must be positive",
            ));
        }
        if !(w.transfer_latency.is_finite() && w.transfer_latency >= 0.0) {
            return Err(ConfigError::new(
                "workload.transfer_latency",
                "must be >= 0",
            ));
        }
        if self.event_cap == Some(0) {
            return Err(ConfigError::new("event_cap", "must be positive"));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: PolicyMode) -> Self {
        let mut cfg = self.clone();
        cfg.policy.mode = mode;
        cfg
    }

    /// Same scenario with every spot and on-demand price multiplied by `k`.
    /// Budgets are left untouched.
    pub fn with_scaled_prices(&self, k: f64) -> Self {
        let mut cfg = self.clone();
        for zone in &mut cfg.market.zones {
            zone.on_demand_price *= k;
            if let Some(p) = zone.spot_price.as_mut() {
                *p *= k;
            }
            for point in &mut zone.spot_prices {
                point.spot_price *= k;
            }
        }
        cfg
    }

    pub fn provisioning_model(&self) -> ProvisioningModel {
        ProvisioningModel {
            base_delay: self.provisioning.base_delay,
            jitter: self.provisioning.jitter,
            seed: self.seed,
        }
    }

    /// On-demand capacity is never reclaimed, so that mode gets no
    /// preemptions whatever the config says.
    pub fn preemption_model(&self, mode: PolicyMode) -> PreemptionModel {
        let kind = match (&self.preemption, mode.pricing()) {
            (_, PricingMode::OnDemand) | (PreemptionConfig::None, _) => PreemptionKind::None,
            (PreemptionConfig::Poisson { rate_per_hour }, _) => PreemptionKind::Poisson {
                rate_per_hour: *rate_per_hour,
            },
            (PreemptionConfig::Trace { events, .. }, _) => PreemptionKind::Trace(events.clone()),
        };
        PreemptionModel {
            kind,
            seed: self.seed,
        }
    }

    pub fn build_market(&self, mode: PolicyMode) -> Result<Market, ConfigError> {
        let mut zones = Vec::with_capacity(self.market.zones.len());
        for (i, z) in self.market.zones.iter().enumerate() {
            let trace = z.price_trace().map_err(|e| {
                ConfigError::new(format!("market.zones[{i}].{}", e.path), e.message)
            })?;
            zones.push((
                Zone {
                    id: z.id.clone(),
                    instance_type: z.instance_type.clone(),
                },
                trace,
            ));
        }
        Market::new(
            zones,
            self.provisioning_model(),
            self.preemption_model(mode),
        )
        .map_err(|e| ConfigError::new("market", e))
    }

    pub fn build_workload(&self) -> Result<Workload, ConfigError> {
        Workload::new(self.clients.clone(), self.workload, self.seed)
            .map_err(|e| ConfigError::new("clients", e))
    }
}
