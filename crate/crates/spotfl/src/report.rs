//! Timeline CSV, run summaries and cross-policy comparison.

use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use spotfl_core::ledger::savings_table;
use spotfl_core::sim::Decision;
use spotfl_core::{ClientId, PolicyMode, RunOutcome, SECS_PER_HOUR};
use thiserror::Error;

pub const SUMMARY_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("comparison needs at least two runs, got {0}")]
    TooFewRuns(usize),
    #[error("scenario digests differ: {0} vs {1}")]
    DigestMismatch(String, String),
    #[error("policy {0} appears in more than one summary")]
    DuplicatePolicy(PolicyMode),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize)]
struct TimelineRow<'a> {
    client_id: &'a str,
    round: u32,
    state: &'static str,
    start_s: String,
    end_s: String,
    rate_per_hr: String,
    cost: String,
}

fn fixed6(x: f64) -> String {
    // Avoid "-0.000000" for tiny negative rounding residue.
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

/// Rounds non-negative amounts to micro-units so that they add up to
/// `total` rounded the same way (largest-remainder method). Each result is
/// within one micro-unit of its exact value.
fn round_preserving_sum(values: &[f64], total: f64) -> Vec<u64> {
    let scaled: Vec<f64> = values.iter().map(|v| v.max(0.0) * 1e6).collect();
    let mut out: Vec<u64> = scaled.iter().map(|x| x.floor() as u64).collect();
    let floor_sum: u64 = out.iter().sum();
    let target = (total.max(0.0) * 1e6).round() as u64;
    let mut shortfall = target.saturating_sub(floor_sum) as usize;
    let mut order: Vec<usize> = (0..values.len())
        .filter(|&i| scaled[i] > out[i] as f64)
        .collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - out[a] as f64;
        let fb = scaled[b] - out[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for i in order {
        if shortfall == 0 {
            break;
        }
        out[i] += 1;
        shortfall -= 1;
    }
    out
}

/// Writes one row per timeline interval, sorted by client id then start.
pub fn write_timeline_csv<W: io::Write>(outcome: &RunOutcome, out: W) -> Result<(), ReportError> {
    let mut rows: Vec<_> = outcome.ledger.intervals().collect();
    rows.sort_by(|a, b| {
        outcome.client_ids[a.client.0]
            .cmp(&outcome.client_ids[b.client.0])
            .then(a.start.total_cmp(&b.start))
            .then(a.end.total_cmp(&b.end))
    });
    let costs = round_preserving_sum(
        &rows.iter().map(|iv| iv.cost).collect::<Vec<_>>(),
        outcome.total_cost(),
    );
    let mut w = csv::Writer::from_writer(out);
    for (iv, micros) in rows.into_iter().zip(costs) {
        w.serialize(TimelineRow {
            client_id: &outcome.client_ids[iv.client.0],
            round: iv.round,
            state: iv.state.name(),
            start_s: fixed6(iv.start.secs()),
            end_s: fixed6(iv.end.secs()),
            rate_per_hr: fixed6(iv.rate),
            cost: format!("{}.{:06}", micros / 1_000_000, micros % 1_000_000),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundCost {
    pub round: u32,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub id: String,
    pub budget: Option<f64>,
    pub spent: f64,
    pub within_budget: bool,
    pub excluded_at_round: Option<u32>,
    pub cumulative_cost: Vec<RoundCost>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: PolicyMode,
    pub total_cost: f64,
    pub calibration_cost: f64,
    pub post_calibration_cost: f64,
    pub billed_hours: f64,
    /// Total cost over billed hours.
    pub mean_rate_per_hr: f64,
    pub rounds_completed: u32,
    pub makespan_s: f64,
    pub terminations: usize,
    pub prewarms: usize,
    pub preemptions: usize,
    pub exclusions: usize,
    pub clients: Vec<ClientSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavingsRow {
    pub policy: PolicyMode,
    pub savings_vs_on_demand: Option<f64>,
    pub savings_vs_plain_spot: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: u32,
    pub scenario: String,
    pub config_digest: String,
    pub seed: u64,
    pub rounds: u32,
    pub policies: Vec<PolicySummary>,
    pub savings: Vec<SavingsRow>,
}

pub fn policy_summary(outcome: &RunOutcome) -> PolicySummary {
    let total_cost = outcome.total_cost();
    let calibration_cost = outcome.calibration_cost();
    let billed_hours: f64 = outcome
        .ledger
        .intervals()
        .filter(|iv| iv.state.is_billed())
        .map(|iv| iv.duration())
        .sum::<f64>()
        / SECS_PER_HOUR;
    let count = |pred: fn(&Decision) -> bool| outcome.decisions.iter().filter(|d| pred(d)).count();
    let clients = outcome
        .client_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let c = ClientId(i);
            let spent = outcome.client_spent(c);
            let budget = outcome.budgets[i];
            ClientSummary {
                id: id.clone(),
                budget,
                spent,
                within_budget: budget.is_none_or(|b| spent <= b),
                excluded_at_round: outcome.gate.excluded_at(c),
                cumulative_cost: outcome
                    .ledger
                    .cumulative_series(c, outcome.rounds)
                    .into_iter()
                    .map(|(round, cost)| RoundCost { round, cost })
                    .collect(),
            }
        })
        .collect();
    PolicySummary {
        policy: outcome.mode,
        total_cost,
        calibration_cost,
        post_calibration_cost: total_cost - calibration_cost,
        billed_hours,
        mean_rate_per_hr: if billed_hours > 0.0 {
            total_cost / billed_hours
        } else {
            0.0
        },
        rounds_completed: outcome.rounds_completed,
        makespan_s: outcome.final_time.secs(),
        terminations: outcome.termination_count(),
        prewarms: outcome
            .prewarms
            .iter()
            .filter(|p| p.fired_at.is_some())
            .count(),
        preemptions: count(|d| matches!(d, Decision::Preempted { .. })),
        exclusions: count(|d| matches!(d, Decision::Excluded { .. })),
        clients,
    }
}

fn savings_rows(policies: &[PolicySummary]) -> Vec<SavingsRow> {
    let totals: Vec<_> = policies.iter().map(|p| (p.policy, p.total_cost)).collect();
    savings_table(&totals)
        .into_iter()
        .filter(|s| s.vs_on_demand.is_some() || s.vs_plain_spot.is_some())
        .filter(|s| s.mode != PolicyMode::OnDemand)
        .map(|s| SavingsRow {
            policy: s.mode,
            savings_vs_on_demand: s.vs_on_demand,
            savings_vs_plain_spot: s.vs_plain_spot,
        })
        .collect()
}

pub fn summarize(
    scenario: &str,
    digest: &str,
    seed: u64,
    rounds: u32,
    outcomes: &[RunOutcome],
) -> Summary {
    let policies: Vec<_> = outcomes.iter().map(policy_summary).collect();
    Summary {
        format: SUMMARY_FORMAT,
        scenario: scenario.into(),
        config_digest: digest.into(),
        seed,
        rounds,
        savings: savings_rows(&policies),
        policies,
    }
}

pub fn write_summary<W: io::Write>(summary: &Summary, mut out: W) -> Result<(), ReportError> {
    serde_json::to_writer_pretty(&mut out, summary).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Merges summaries of the same scenario into one comparison. Savings are
/// recomputed over the merged set.
pub fn compare(summaries: &[Summary]) -> Result<Summary, ReportError> {
    let runs: usize = summaries.iter().map(|s| s.policies.len()).sum();
    if summaries.len() < 2 && runs < 2 {
        return Err(ReportError::TooFewRuns(runs));
    }
    let first = &summaries[0];
    let mut policies: Vec<PolicySummary> = Vec::new();
    for s in summaries {
        if s.config_digest != first.config_digest {
            return Err(ReportError::DigestMismatch(
                first.config_digest.clone(),
                s.config_digest.clone(),
            ));
        }
        for p in &s.policies {
            if policies.iter().any(|q| q.policy == p.policy) {
                return Err(ReportError::DuplicatePolicy(p.policy));
            }
            policies.push(p.clone());
        }
    }
    if policies.len() < 2 {
        return Err(ReportError::TooFewRuns(policies.len()));
    }
    policies.sort_by_key(|p| p.policy);
    Ok(Summary {
        format: SUMMARY_FORMAT,
        scenario: first.scenario.clone(),
        config_digest: first.config_digest.clone(),
        seed: first.seed,
        rounds: first.rounds,
        savings: savings_rows(&policies),
        policies,
    })
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "---".into(), |v| format!("{v:.2} %"))
}

/// Plain-text table with one row per policy.
pub fn render_table(summary: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario {} (rounds {}, seed {}, digest {})",
        summary.scenario,
        summary.rounds,
        summary.seed,
        &summary.config_digest[..12.min(summary.config_digest.len())]
    );
    let _ = writeln!(
        out,
        "{:<14} {:>12} {:>12} {:>14} {:>14}",
        "policy", "rate ($/hr)", "total cost", "vs on-demand", "vs plain spot"
    );
    for p in &summary.policies {
        let row = summary.savings.iter().find(|s| s.policy == p.policy);
        let _ = writeln!(
            out,
            "{:<14} {:>12.4} {:>12.6} {:>14} {:>14}",
            p.policy.name(),
            p.mean_rate_per_hr,
            p.total_cost,
            pct(row.and_then(|r| r.savings_vs_on_demand)),
            pct(row.and_then(|r| r.savings_vs_plain_spot)),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(mode: PolicyMode, total: f64) -> PolicySummary {
        PolicySummary {
            policy: mode,
            total_cost: total,
            calibration_cost: 0.0,
            post_calibration_cost: total,
            billed_hours: 1.0,
            mean_rate_per_hr: total,
            rounds_completed: 3,
            makespan_s: 100.0,
            terminations: 0,
            prewarms: 0,
            preemptions: 0,
            exclusions: 0,
            clients: vec![],
        }
    }

    fn summary(digest: &str, policies: Vec<PolicySummary>) -> Summary {
        Summary {
            format: SUMMARY_FORMAT,
            scenario: "s".into(),
            config_digest: digest.into(),
            seed: 0,
            rounds: 3,
            savings: savings_rows(&policies),
            policies,
        }
    }

    #[test]
    fn fca_and_on_demand_give_one_savings_row() {
        let cmp = compare(&[
            summary("d", vec![policy(PolicyMode::FedCostAware, 7.17402825)]),
            summary("d", vec![policy(PolicyMode::OnDemand, 24.29784)]),
        ])
        .unwrap();
        assert_eq!(cmp.savings.len(), 1);
        assert!((cmp.savings[0].savings_vs_on_demand.unwrap() - 70.47).abs() < 0.005);
    }

    #[test]
    fn three_policies_give_two_rows() {
        let cmp = compare(&[
            summary("d", vec![policy(PolicyMode::OnDemand, 24.29784)]),
            summary("d", vec![policy(PolicyMode::PlainSpot, 9.5238855)]),
            summary("d", vec![policy(PolicyMode::FedCostAware, 7.17402825)]),
        ])
        .unwrap();
        assert_eq!(cmp.savings.len(), 2);
        assert_eq!(cmp.policies[0].policy, PolicyMode::FedCostAware);
        let table = render_table(&cmp);
        assert!(table.contains("60.80 %"), "{table}");
    }

    #[test]
    fn single_summary_rejected() {
        let one = summary("d", vec![policy(PolicyMode::FedCostAware, 1.0)]);
        assert!(matches!(compare(&[one]), Err(ReportError::TooFewRuns(1))));
    }

    #[test]
    fn digest_mismatch_rejected() {
        let err = compare(&[
            summary("a", vec![policy(PolicyMode::FedCostAware, 1.0)]),
            summary("b", vec![policy(PolicyMode::OnDemand, 2.0)]),
        ])
        .unwrap_err();
        assert!(matches!(err, ReportError::DigestMismatch(..)));
    }

    #[test]
    fn zero_baseline_savings_absent() {
        let rows = savings_rows(&[
            policy(PolicyMode::FedCostAware, 0.0),
            policy(PolicyMode::OnDemand, 0.0),
        ]);
        assert!(rows.is_empty());
    }

    #[test]
    fn rounded_costs_sum_to_total() {
        let values: Vec<f64> = (0..500).map(|i| 0.0131704 + i as f64 * 1.3e-7).collect();
        let total: f64 = values.iter().sum();
        let micros = round_preserving_sum(&values, total);
        assert_eq!(micros.iter().sum::<u64>(), (total * 1e6).round() as u64);
        for (m, v) in micros.iter().zip(&values) {
            assert!((*m as f64 - v * 1e6).abs() < 1.0);
        }
        assert_eq!(round_preserving_sum(&[0.0, 0.5e-6], 0.5e-6), vec![0, 1]);
    }

    #[test]
    fn fixed6_has_no_negative_zero() {
        assert_eq!(fixed6(-1e-12), "0.000000");
        assert_eq!(fixed6(0.0658499999), "0.065850");
    }
}
