//! Std companion to `spotfl-core`: scenario files, trace CSVs, reports,
//! and the `spotfl` command-line tool.

pub mod config;
pub mod report;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use spotfl_core::{simulate, PolicyMode, RunOutcome, ScenarioConfig, SimError};

pub use config::{config_digest, load_scenario, LoadError};
pub use report::{compare, summarize, write_summary, write_timeline_csv, ReportError, Summary};

/// Files written by [`write_outputs`].
#[derive(Debug, Clone)]
pub struct Written {
    pub timelines: Vec<PathBuf>,
    pub summaries: Vec<PathBuf>,
}

/// Runs every mode in `modes` on `cfg`.
pub fn run_modes(cfg: &ScenarioConfig, modes: &[PolicyMode]) -> Result<Vec<RunOutcome>, SimError> {
    modes.iter().map(|&m| simulate(cfg, m)).collect()
}

/// Writes `timeline-<policy>.csv` and `summary-<policy>.json` per run, and
/// a combined `summary.json` when more than one policy ran.
pub fn write_outputs(
    cfg: &ScenarioConfig,
    outcomes: &[RunOutcome],
    dir: &Path,
) -> Result<Written, ReportError> {
    fs::create_dir_all(dir)?;
    let digest = config_digest(cfg);
    let mut written = Written {
        timelines: Vec::new(),
        summaries: Vec::new(),
    };
    for outcome in outcomes {
        let name = outcome.mode.name();
        let path = dir.join(format!("timeline-{name}.csv"));
        write_timeline_csv(outcome, BufWriter::new(fs::File::create(&path)?))?;
        written.timelines.push(path);

        let summary = summarize(
            &cfg.name,
            &digest,
            cfg.seed,
            cfg.rounds,
            std::slice::from_ref(outcome),
        );
        let path = dir.join(format!("summary-{name}.json"));
        write_summary(&summary, BufWriter::new(fs::File::create(&path)?))?;
        written.summaries.push(path);
    }
    if outcomes.len() > 1 {
        let summary = summarize(&cfg.name, &digest, cfg.seed, cfg.rounds, outcomes);
        let path = dir.join("summary.json");
        write_summary(&summary, BufWriter::new(fs::File::create(&path)?))?;
        written.summaries.push(path);
    }
    Ok(written)
}

/// Reads a summary written by [`write_summary`].
pub fn read_summary(path: &Path) -> Result<Summary, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        LoadError::Parse {
            path: path.to_path_buf(),
            field,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })
}
