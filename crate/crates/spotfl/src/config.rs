//! Scenario files: JSON parsing, external trace CSVs, digest.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};
use spotfl_core::market::{PreemptionTraceEntry, PricePoint};
use spotfl_core::scenario::PreemptionConfig;
use spotfl_core::{ConfigError, ScenarioConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}:{column}: at `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Trace {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {0}", path = .1.display())]
    Invalid(ConfigError, PathBuf),
}

impl LoadError {
    /// Missing files are IO problems; everything else is a bad config.
    pub fn is_io(&self) -> bool {
        matches!(self, LoadError::Io { .. })
    }
}

#[derive(Debug, Deserialize)]
struct PriceRow {
    zone_id: String,
    effective_from_seconds: f64,
    spot_price_per_hour: f64,
    on_demand_price_per_hour: f64,
}

#[derive(Debug, Deserialize)]
struct PreemptionRow {
    zone: String,
    fire_at: f64,
}

/// Reads, resolves and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cfg = parse_scenario_str(&text, path, base)?;
    cfg.validate()
        .map_err(|e| LoadError::Invalid(e, path.to_path_buf()))?;
    Ok(cfg)
}

/// Parses scenario JSON and loads any referenced trace files relative to
/// `base`. The result is not validated.
pub fn parse_scenario_str(
    text: &str,
    path: &Path,
    base: &Path,
) -> Result<ScenarioConfig, LoadError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        LoadError::Parse {
            path: path.to_path_buf(),
            field,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    resolve_traces(&mut cfg, base)?;
    Ok(cfg)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, LoadError> {
    let file = fs::File::open(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|source| LoadError::Trace {
            path: path.to_path_buf(),
            source,
        })
}

/// Replaces file references with the rows they contain. A price file may
/// hold several zones; each zone keeps only its own rows, and their
/// on-demand column must agree with the zone's `on_demand_price`.
pub fn resolve_traces(cfg: &mut ScenarioConfig, base: &Path) -> Result<(), LoadError> {
    for (i, zone) in cfg.market.zones.iter_mut().enumerate() {
        let Some(file) = zone.spot_price_file.take() else {
            continue;
        };
        let path = base.join(&file);
        let invalid = |message: String| {
            LoadError::Invalid(
                ConfigError::new(format!("market.zones[{i}].spot_price_file"), message),
                path.clone(),
            )
        };
        let rows: Vec<PriceRow> = read_csv(&path)?;
        let rows: Vec<PriceRow> = rows.into_iter().filter(|r| r.zone_id == zone.id).collect();
        if rows.is_empty() {
            return Err(invalid(format!("no rows for zone `{}`", zone.id)));
        }
        if let Some(r) = rows
            .iter()
            .find(|r| r.on_demand_price_per_hour != zone.on_demand_price)
        {
            return Err(invalid(format!(
                "on-demand price {} at {} s differs from the zone's {}",
                r.on_demand_price_per_hour, r.effective_from_seconds, zone.on_demand_price
            )));
        }
        zone.spot_prices
            .extend(rows.into_iter().map(|r| PricePoint {
                effective_from: r.effective_from_seconds,
                spot_price: r.spot_price_per_hour,
            }));
    }
    if let PreemptionConfig::Trace { events, file } = &mut cfg.preemption {
        if let Some(f) = file.take() {
            let rows: Vec<PreemptionRow> = read_csv(&base.join(&f))?;
            events.extend(rows.into_iter().map(|r| PreemptionTraceEntry {
                zone: r.zone,
                fire_at: r.fire_at,
            }));
        }
    }
    Ok(())
}

/// SHA-256 over the resolved scenario with the policy mode and output
/// directory blanked, so runs of the same experiment under different
/// policies share a digest.
pub fn config_digest(cfg: &ScenarioConfig) -> String {
    let mut canonical = cfg.clone();
    canonical.policy.mode = Default::default();
    canonical.outputs = None;
    let bytes = serde_json::to_vec(&canonical).expect("scenario serializes");
    format!("{:x}", Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "minimal",
        "rounds": 3,
        "clients": [
            {"id": "a", "epoch_cold": 700, "epoch_warm": 600,
             "checkpoint_interval": 60, "candidate_zones": ["z1"]}
        ],
        "market": {"zones": [{"id": "z1", "on_demand_price": 1.008, "spot_price": 0.3951}]},
        "provisioning": {"base_delay": 120}
    }"#;

    fn parse(text: &str) -> Result<ScenarioConfig, LoadError> {
        let cfg = parse_scenario_str(text, Path::new("test.json"), Path::new("."))?;
        cfg.validate()
            .map_err(|e| LoadError::Invalid(e, "test.json".into()))?;
        Ok(cfg)
    }

    #[test]
    fn minimal_gets_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.policy.ema_alpha, 0.3);
        assert_eq!(cfg.policy.t_threshold, 60.0);
        assert_eq!(cfg.policy.t_buffer, 30.0);
        assert_eq!(cfg.preemption, PreemptionConfig::None);
        assert_eq!(cfg.clients[0].budget, None);
    }

    #[test]
    fn parse_error_names_field() {
        let bad = MINIMAL.replace("\"epoch_cold\": 700", "\"epoch_cold\": \"slow\"");
        match parse(&bad).unwrap_err() {
            LoadError::Parse { field, line, .. } => {
                assert_eq!(field, "clients[0].epoch_cold");
                assert_eq!(line, 5);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let bad = MINIMAL.replace("\"rounds\": 3", "\"rounds\": 3, \"round\": 4");
        assert!(matches!(parse(&bad), Err(LoadError::Parse { .. })));
    }

    #[test]
    fn spot_above_on_demand_is_invalid() {
        let bad = MINIMAL.replace("\"spot_price\": 0.3951", "\"spot_price\": 1.5");
        match parse(&bad).unwrap_err() {
            LoadError::Invalid(e, _) => assert_eq!(e.path, "market.zones[0].spot_prices"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn digest_ignores_policy_mode_only() {
        let cfg = parse(MINIMAL).unwrap();
        let d = config_digest(&cfg);
        assert_eq!(d.len(), 64);
        assert_eq!(
            d,
            config_digest(&cfg.with_mode(spotfl_core::PolicyMode::OnDemand))
        );
        let mut other = cfg.clone();
        other.seed = 99;
        assert_ne!(d, config_digest(&other));
    }

    #[test]
    fn trace_files_resolved_relative_to_base() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("prices.csv"),
            "zone_id,effective_from_seconds,spot_price_per_hour,on_demand_price_per_hour\n\
             z1,0,0.40,1.008\nz1,3600,0.35,1.008\nz9,0,0.10,0.50\n",
        )
        .unwrap();
        fs::write(dir.path().join("preempt.csv"), "zone,fire_at\nz1,900\n").unwrap();
        let text = MINIMAL
            .replace("\"spot_price\": 0.3951", "\"spot_price_file\": \"prices.csv\"")
            .replace(
                "\"provisioning\"",
                "\"preemption\": {\"kind\": \"trace\", \"file\": \"preempt.csv\"}, \"provisioning\"",
            );
        let path = dir.path().join("s.json");
        fs::write(&path, text).unwrap();
        let cfg = load_scenario(&path).unwrap();
        assert_eq!(cfg.market.zones[0].spot_prices.len(), 2);
        match &cfg.preemption {
            PreemptionConfig::Trace { events, file } => {
                assert_eq!(events.len(), 1);
                assert!(file.is_none());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn price_file_on_demand_must_match_zone() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("prices.csv"),
            "zone_id,effective_from_seconds,spot_price_per_hour,on_demand_price_per_hour\nz1,0,0.40,1.2\n",
        )
        .unwrap();
        let path = dir.path().join("s.json");
        fs::write(
            &path,
            MINIMAL.replace(
                "\"spot_price\": 0.3951",
                "\"spot_price_file\": \"prices.csv\"",
            ),
        )
        .unwrap();
        match load_scenario(&path).unwrap_err() {
            LoadError::Invalid(e, _) => assert_eq!(e.path, "market.zones[0].spot_price_file"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_file_is_io() {
        let err = load_scenario(Path::new("/nonexistent/scenario.json")).unwrap_err();
        assert!(err.is_io());
    }
}
