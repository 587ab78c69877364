//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spotfl::{config_digest, load_scenario, write_outputs};
use spotfl_core::market::Jitter;
use spotfl_core::scenario::{MarketConfig, PreemptionConfig, ProvisioningConfig, ZoneConfig};
use spotfl_core::scheduler::{
    evaluate_termination, FinishBasis, RoundClient, SchedulerEstimates, TimingObservation,
};
use spotfl_core::sim::{Decision, RunOutcome};
use spotfl_core::workload::{Noise, WorkloadParams};
use spotfl_core::{
    compute_savings, simulate, ClientId, ClientProfile, PolicyMode, PolicyParams, ScenarioConfig,
    SimTime, TerminationDecision,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

fn bundled(name: &str) -> ScenarioConfig {
    load_scenario(&scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run(cfg: &ScenarioConfig, mode: PolicyMode) -> Result<RunOutcome, String> {
    simulate(cfg, mode).map_err(|e| format!("{} on {}: {e}", mode, cfg.name))
}

fn rel_eq(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure!(
        elapsed.as_secs_f64() < limit_s,
        "took {:.2}s, limit {limit_s}s",
        elapsed.as_secs_f64()
    );
    Ok(())
}

fn with_flat_price(cfg: &ScenarioConfig, spot: f64, on_demand: f64) -> ScenarioConfig {
    let mut cfg = cfg.clone();
    for z in &mut cfg.market.zones {
        *z = ZoneConfig {
            instance_type: z.instance_type.clone(),
            ..ZoneConfig::flat(z.id.clone(), spot, on_demand)
        };
    }
    cfg
}

fn interval_bounds(o: &RunOutcome) -> Vec<(usize, u32, &'static str, f64, f64)> {
    o.ledger
        .intervals()
        .map(|iv| {
            (
                iv.client.0,
                iv.round,
                iv.state.name(),
                iv.start.secs(),
                iv.end.secs(),
            )
        })
        .collect()
}

// ---- 1 ---------------------------------------------------------------------

fn plain_spot_ratio() -> Check {
    // (label, spot, on-demand, published savings, tolerance in pp)
    let cases = [
        ("Fed-ISIC2019/CIFAR-10", 0.3951, 1.0080, 60.80357143, 0.001),
        ("AI-READI", 0.3946, 1.0060, 60.77693133, 0.01),
        ("MNIST", 0.3937, 1.0060, 60.89463496, 0.05),
    ];
    let base = bundled("fed-isic-like.json");
    let mut notes = Vec::new();
    for (label, spot, od, published, tol) in cases {
        let start = Instant::now();
        let cfg = with_flat_price(&base, spot, od);
        let ps = run(&cfg, PolicyMode::PlainSpot)?;
        let odr = run(&cfg, PolicyMode::OnDemand)?;
        ensure!(
            interval_bounds(&ps) == interval_bounds(&odr),
            "{label}: plain-spot and on-demand timelines differ"
        );
        let savings =
            compute_savings(ps.total_cost(), odr.total_cost()).map_err(|e| e.to_string())?;
        let ratio = (1.0 - spot / od) * 100.0;
        ensure!(
            (savings - ratio).abs() < 1e-9,
            "{label}: savings {savings} != price ratio {ratio}"
        );
        ensure!(
            (savings - published).abs() <= tol,
            "{label}: savings {savings:.6}% vs published {published}% (tol {tol} pp)"
        );
        within(start.elapsed(), 1.0)?;
        notes.push(format!("{label} {savings:.4}%"));
    }
    Ok(notes.join(", "))
}

// ---- 2 ---------------------------------------------------------------------

fn fedcostaware_reconstruction() -> Check {
    let start = Instant::now();
    let cfg = bundled("fed-isic-like.json");
    ensure!(
        cfg.clients.len() == 6 && cfg.rounds == 20,
        "bundled scenario shape changed"
    );
    let fca = run(&cfg, PolicyMode::FedCostAware)?;
    let od = run(&cfg, PolicyMode::OnDemand)?;
    let od_hours = od.total_cost() / cfg.market.zones[0].on_demand_price;
    let target_hours = 24.29784 / 1.008;
    ensure!(
        (od_hours - target_hours).abs() / target_hours < 0.05,
        "on-demand GPU-hours {od_hours:.3} not within 5% of {target_hours:.3}"
    );
    let savings = compute_savings(fca.total_cost(), od.total_cost()).map_err(|e| e.to_string())?;
    ensure!(
        (65.0..=75.0).contains(&savings),
        "FedCostAware savings {savings:.2}% outside [65, 75]"
    );
    ensure!(
        savings > 60.80357143,
        "FedCostAware savings {savings:.2}% not above plain-spot ratio"
    );
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "savings {savings:.2}% vs on-demand, on-demand {od_hours:.3} GPU-h (target {target_hours:.3})"
    ))
}

// ---- 3 and 5 ---------------------------------------------------------------

struct Random {
    cfg: ScenarioConfig,
    spin: f64,
}

fn random_scenario(rng: &mut ChaCha8Rng, index: usize) -> Random {
    let n = rng.random_range(2..=8);
    let rounds = rng.random_range(3..=10);
    let spin = rng.random_range(30..=300) as f64;
    let clients = (0..n)
        .map(|i| {
            let warm = rng.random_range(60..=2000) as f64;
            let cold = warm + rng.random_range(0..=300) as f64;
            ClientProfile {
                id: format!("c{i}"),
                epoch_cold: cold,
                epoch_warm: warm,
                noise: Noise::None,
                budget: None,
                checkpoint_interval: rng.random_range(30..=600) as f64,
                candidate_zones: vec!["z".into()],
            }
        })
        .collect();
    let spot = rng.random_range(0.05..0.9);
    let cfg = ScenarioConfig {
        name: format!("random-{index}"),
        rounds,
        seed: index as u64,
        clients,
        market: MarketConfig {
            zones: vec![ZoneConfig::flat("z", spot, 1.0)],
        },
        provisioning: ProvisioningConfig {
            base_delay: spin,
            jitter: Jitter::None,
        },
        preemption: PreemptionConfig::None,
        policy: PolicyParams {
            t_threshold: rng.random_range(0..=120) as f64,
            t_buffer: rng.random_range(0..=60) as f64,
            ..PolicyParams::default()
        },
        workload: WorkloadParams::default(),
        outputs: None,
        event_cap: None,
    };
    Random { cfg, spin }
}

/// Closed-form FedCostAware cost for a deterministic single-price scenario
/// with exact estimates. Returns (cost, terminations).
fn closed_form_cost(cfg: &ScenarioConfig, spin: f64) -> (f64, usize) {
    let cold: Vec<f64> = cfg.clients.iter().map(|c| c.epoch_cold).collect();
    let warm: Vec<f64> = cfg.clients.iter().map(|c| c.epoch_warm).collect();
    let theta = cfg.policy.t_threshold;
    let buffer = cfg.policy.t_buffer;
    let n = cold.len();

    // Calibration: everyone billed from 0 to the second barrier.
    let b1 = spin + cold.iter().cloned().fold(f64::MIN, f64::max);
    let b2 = b1 + warm.iter().cloned().fold(f64::MIN, f64::max);
    let mut billed = b2 * n as f64;
    let mut terminations = 0;

    let mut barrier = b2;
    let mut terminated_prev = vec![false; n];
    for r in 3..=cfg.rounds {
        let s = barrier;
        let finish: Vec<f64> = (0..n)
            .map(|i| s + if terminated_prev[i] { cold[i] } else { warm[i] })
            .collect();
        let b = finish.iter().cloned().fold(f64::MIN, f64::max);
        let mut terminated = vec![false; n];
        for i in 0..n {
            // A client still billed when the round closes is charged up to B.
            if b - finish[i] - spin > theta {
                terminated[i] = true;
                terminations += 1;
                billed += finish[i] - s;
                if r < cfg.rounds {
                    // Pre-warm spin-up plus buffer remainder before B.
                    let q = (b - spin - buffer).max(finish[i]);
                    billed += b - q;
                }
            } else {
                billed += b - s;
            }
        }
        terminated_prev = terminated;
        barrier = b;
    }
    let price = cfg.market.zones[0].spot_price.unwrap();
    (billed / 3600.0 * price, terminations)
}

fn prewarm_punctuality(o: &RunOutcome) -> Result<usize, String> {
    let mut checked = 0;
    for p in o.prewarms.iter().filter(|p| !p.cancelled) {
        let ready = p
            .ready_at
            .ok_or_else(|| format!("{}: pre-warm for {} never became ready", o.mode, p.client))?;
        ensure!(
            ready <= p.slowest_finish,
            "pre-warm for {} ready at {ready} after F_s {}",
            p.client,
            p.slowest_finish
        );
        checked += 1;
    }
    for rec in o.round_records.iter().filter(|r| r.round >= 3) {
        for (c, d) in &rec.start_delays {
            ensure!(
                *d == 0.0,
                "round {} start delayed by {d}s for {c}",
                rec.round
            );
        }
    }
    Ok(checked)
}

fn closed_form_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1_05ED);
    let mut worst = 0.0f64;
    let mut with_terminations = 0;
    const N: usize = 250;
    for k in 0..N {
        let Random { cfg, spin } = random_scenario(&mut rng, k);
        let out = run(&cfg, PolicyMode::FedCostAware)?;
        let (expected, terms) = closed_form_cost(&cfg, spin);
        ensure!(
            rel_eq(out.total_cost(), expected, 1e-9),
            "{}: simulated {} vs closed form {expected}",
            cfg.name,
            out.total_cost()
        );
        ensure!(
            out.termination_count() == terms,
            "{}: {} terminations vs closed form {terms}",
            cfg.name,
            out.termination_count()
        );
        worst = worst.max((out.total_cost() - expected).abs() / expected);
        with_terminations += usize::from(terms > 0);
    }
    ensure!(
        with_terminations >= N / 4,
        "only {with_terminations} of {N} scenarios exercised terminations"
    );
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "{N} scenarios, {with_terminations} with terminations, worst relative error {worst:.1e}"
    ))
}

fn punctuality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1_05ED);
    let mut prewarms = 0;
    let mut runs = 0;
    for name in ["fed-isic-like.json", "mnist-like.json"] {
        prewarms += prewarm_punctuality(&run(&bundled(name), PolicyMode::FedCostAware)?)?;
        runs += 1;
    }
    for k in 0..250 {
        let Random { cfg, .. } = random_scenario(&mut rng, k);
        prewarms += prewarm_punctuality(&run(&cfg, PolicyMode::FedCostAware)?)?;
        runs += 1;
    }
    ensure!(prewarms > 0, "no pre-warms exercised");
    Ok(format!(
        "{prewarms} pre-warms across {runs} runs ready by F_s; zero start delay from round 3"
    ))
}

// ---- 4 ---------------------------------------------------------------------

fn termination_property() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = PolicyParams::default();
    let mut terminations = 0;
    const N: usize = 20_000;
    for k in 0..N {
        // Half the draws on an integer grid to hit equality boundaries.
        let (fs, fi, spin, theta) = if k % 2 == 0 {
            (
                rng.random_range(0..=400) as f64,
                rng.random_range(0..=400) as f64,
                rng.random_range(1..=200) as f64,
                rng.random_range(0..=200) as f64,
            )
        } else {
            (
                rng.random_range(0.0..1e5),
                rng.random_range(0.0..1e5),
                rng.random_range(0.001..600.0),
                rng.random_range(0.0..600.0),
            )
        };
        let exec = rng.random_range(1.0..3000.0);
        let mut est = SchedulerEstimates::new(2, params.ema_alpha);
        let participants = [ClientId(0), ClientId(1)].into_iter().collect();
        let obs = |total, execution| TimingObservation { total, execution };
        est.calibrate(
            1,
            &participants,
            &[
                (ClientId(0), obs(spin + exec, exec)),
                (ClientId(1), obs(spin + exec, exec)),
            ]
            .into_iter()
            .collect(),
        )
        .map_err(|e| e.to_string())?;
        est.calibrate(
            2,
            &participants,
            &[
                (ClientId(0), obs(exec, exec)),
                (ClientId(1), obs(exec, exec)),
            ]
            .into_iter()
            .collect(),
        )
        .map_err(|e| e.to_string())?;
        let spin_est = est.client(ClientId(0)).spin_up.unwrap();
        let p = PolicyParams {
            t_threshold: theta,
            ..params
        };
        let slowest = fs.max(fi);
        let clients = [
            RoundClient {
                client: ClientId(0),
                basis: FinishBasis::Known(SimTime::from_secs(fi)),
            },
            RoundClient {
                client: ClientId(1),
                basis: FinishBasis::Known(SimTime::from_secs(fs)),
            },
        ];
        let eval = evaluate_termination(ClientId(0), SimTime::from_secs(fi), &clients, &p, &est)
            .map_err(|e| e.to_string())?;
        let predicate = (slowest - fi) - spin_est > theta;
        let got = matches!(eval.decision, TerminationDecision::Terminate { .. });
        ensure!(
            got == predicate,
            "F_s={slowest} F_i={fi} spin={spin_est} threshold={theta}: rule says {got}, predicate {predicate}"
        );
        terminations += usize::from(got);

        // The argmax client is never stopped.
        let argmax = if fs >= fi { ClientId(1) } else { ClientId(0) };
        let eval = evaluate_termination(argmax, SimTime::from_secs(slowest), &clients, &p, &est)
            .map_err(|e| e.to_string())?;
        ensure!(
            eval.decision == TerminationDecision::Keep,
            "slowest client terminated at F_s={slowest}"
        );
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!("{N} tuples agree ({terminations} terminate)"))
}

// ---- 6 ---------------------------------------------------------------------

fn fault_scenario() -> ScenarioConfig {
    let client = |id: &str, cold: f64, warm: f64, zone: &str| ClientProfile {
        id: id.into(),
        epoch_cold: cold,
        epoch_warm: warm,
        noise: Noise::None,
        budget: None,
        checkpoint_interval: 100.0,
        candidate_zones: vec![zone.into()],
    };
    // Round 4 runs [4420, 5820]; the fast clients stop at 4720 and queue
    // pre-warms for 5670. The straggler's zone is reclaimed at 5000.
    ScenarioConfig {
        name: "fault-injection".into(),
        rounds: 6,
        seed: 5,
        clients: vec![
            client("straggler", 1500.0, 1400.0, "zone-s"),
            client("fast-1", 300.0, 240.0, "zone-f"),
            client("fast-2", 360.0, 300.0, "zone-f"),
        ],
        market: MarketConfig {
            zones: vec![
                ZoneConfig::flat("zone-f", 0.3951, 1.008),
                ZoneConfig::flat("zone-s", 0.3951, 1.008),
            ],
        },
        provisioning: ProvisioningConfig {
            base_delay: 120.0,
            jitter: Jitter::None,
        },
        preemption: PreemptionConfig::Trace {
            events: vec![spotfl_core::market::PreemptionTraceEntry {
                zone: "zone-s".into(),
                fire_at: 5000.0,
            }],
            file: None,
        },
        policy: PolicyParams::default(),
        workload: WorkloadParams::default(),
        outputs: None,
        event_cap: None,
    }
}

fn fault_tolerance() -> Check {
    let start = Instant::now();
    let cfg = fault_scenario();
    let fca = run(&cfg, PolicyMode::FedCostAware)?;
    let spot = run(&cfg, PolicyMode::PlainSpot)?;
    let plans: Vec<_> = fca
        .decisions
        .iter()
        .filter_map(|d| match d {
            Decision::Preempted { plan, .. } => Some(plan),
            _ => None,
        })
        .collect();
    ensure!(
        plans.len() == 1,
        "expected one preemption, saw {}",
        plans.len()
    );
    let plan = plans[0];
    let interval = cfg.clients[plan.client.0].checkpoint_interval;
    ensure!(
        plan.loss.lost_work < interval,
        "lost work {} >= checkpoint interval {interval}",
        plan.loss.lost_work
    );
    let buffer = cfg.policy.t_buffer;
    let mut adjusted = 0;
    for d in &fca.decisions {
        if let Decision::PrewarmAdjusted {
            original_slowest_finish,
            recovery_finish,
            adjustment,
            ..
        } = d
        {
            let spin = fca.estimates.client(adjustment.client).spin_up.unwrap();
            let expected = original_slowest_finish.max(*recovery_finish) - spin - buffer;
            ensure!(
                adjustment.new_start == expected,
                "pre-warm of {} moved to {} instead of {expected}",
                adjustment.client,
                adjustment.new_start
            );
            let fired = fca
                .prewarms
                .iter()
                .find(|p| {
                    p.client == adjustment.client
                        && p.queued_at <= plan.preempted_at
                        && p.fired_at.is_some_and(|f| f >= plan.preempted_at)
                })
                .ok_or_else(|| format!("adjusted pre-warm of {} not found", adjustment.client))?;
            ensure!(
                fired.fired_at == Some(expected.max(plan.preempted_at)),
                "pre-warm of {} fired at {:?}, expected {expected}",
                adjustment.client,
                fired.fired_at
            );
            adjusted += 1;
        }
    }
    ensure!(
        adjusted == 2,
        "expected both queued pre-warms adjusted, saw {adjusted}"
    );
    ensure!(
        fca.total_cost() <= spot.total_cost(),
        "FedCostAware {} > plain spot {} under the same fault",
        fca.total_cost(),
        spot.total_cost()
    );
    // Same check on the bundled faulted scenario (jittered spin-up, price trace).
    let bundled_cfg = bundled("faulted.json");
    let (bf, bs) = (
        run(&bundled_cfg, PolicyMode::FedCostAware)?,
        run(&bundled_cfg, PolicyMode::PlainSpot)?,
    );
    ensure!(
        bf.total_cost() <= bs.total_cost(),
        "bundled faulted: FedCostAware {} > plain spot {}",
        bf.total_cost(),
        bs.total_cost()
    );
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "lost {:.1} of {interval} s, {adjusted} pre-warms moved past recovery, cost {:.6} <= {:.6}",
        plan.loss.lost_work,
        fca.total_cost(),
        spot.total_cost()
    ))
}

// ---- 7 ---------------------------------------------------------------------

fn budget_adherence() -> Check {
    let mut cfg = bundled("fed-isic-like.json");
    let unlimited = run(&cfg, PolicyMode::FedCostAware)?;
    let straggler = ClientId(0);
    let full = unlimited.client_spent(straggler);
    let budget = full / 2.0;
    cfg.clients[0].budget = Some(budget);
    let out = run(&cfg, PolicyMode::FedCostAware)?;
    let excluded = out
        .gate
        .excluded_at(straggler)
        .ok_or("budget-limited client was never excluded")?;

    // First round whose estimate exceeds the remaining budget, recomputed
    // from the unlimited run (identical up to the exclusion).
    let price = cfg.market.zones[0].spot_price.unwrap();
    let profile = &cfg.clients[0];
    let series = unlimited.ledger.cumulative_series(straggler, cfg.rounds);
    let expected = (2..=cfg.rounds)
        .find(|&r| {
            let spent = series[(r - 2) as usize].1;
            let epoch = if r == 2 {
                profile.epoch_cold
            } else {
                profile.epoch_warm
            };
            spent + epoch / 3600.0 * price > budget
        })
        .ok_or("budget never binds")?;
    ensure!(
        excluded == expected,
        "excluded at round {excluded}, expected {expected}"
    );
    for d in &out.decisions {
        if let Decision::Excluded {
            estimated_cost: Some(est),
            spent,
            budget: Some(b),
            round,
            ..
        } = d
        {
            ensure!(
                spent + est > *b,
                "round {round}: excluded although estimate fits"
            );
        }
    }
    for rec in &out.round_records {
        let participates = rec.participants.contains(&straggler);
        ensure!(
            participates == (rec.round < excluded),
            "round {}: participation {participates} after exclusion at {excluded}",
            rec.round
        );
        ensure!(
            rec.barrier_at.is_some(),
            "round {} barrier never completed",
            rec.round
        );
        if rec.round >= excluded {
            ensure!(
                rec.participants.len() == cfg.clients.len() - 1,
                "round {} has {} participants",
                rec.round,
                rec.participants.len()
            );
        }
    }
    ensure!(
        out.rounds_completed == cfg.rounds,
        "{} of {} rounds completed",
        out.rounds_completed,
        cfg.rounds
    );
    let spent = out.client_spent(straggler);
    ensure!(spent <= budget, "spent {spent} > budget {budget}");
    let after: f64 = out
        .ledger
        .client_intervals(straggler)
        .iter()
        .filter(|iv| iv.round >= excluded)
        .map(|iv| iv.cost)
        .sum();
    ensure!(
        after == 0.0,
        "excluded client billed {after} after exclusion"
    );
    Ok(format!(
        "excluded at round {excluded}, spent {spent:.6} of {budget:.6}, {} rounds completed",
        out.rounds_completed
    ))
}

// ---- 8 ---------------------------------------------------------------------

fn conservation_and_determinism() -> Check {
    let mut checked = 0;
    for name in ["fed-isic-like.json", "mnist-like.json", "faulted.json"] {
        let cfg = bundled(name);
        for mode in PolicyMode::ALL {
            let o = run(&cfg, mode)?;
            let total = o.total_cost();
            let by_interval: f64 = o.ledger.intervals().map(|iv| iv.cost).sum();
            ensure!(
                rel_eq(total, by_interval, 1e-9),
                "{name}/{mode}: ledger {total} vs intervals {by_interval}"
            );
            ensure!(
                rel_eq(total, o.instance_accruals, 1e-9),
                "{name}/{mode}: ledger {total} vs instance accruals {}",
                o.instance_accruals
            );
            for iv in o.ledger.intervals() {
                ensure!(
                    rel_eq(iv.cost, iv.duration() / 3600.0 * iv.rate, 1e-9) || iv.cost == 0.0,
                    "{name}/{mode}: interval cost mismatch"
                );
            }
            checked += 1;
        }
    }

    let dirs = [
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    ];
    let mut files = 0;
    for name in ["fed-isic-like.json", "faulted.json"] {
        let mut noisy = bundled(name);
        for c in &mut noisy.clients {
            c.noise = Noise::LogNormal { sigma: 0.1 };
        }
        for cfg in [bundled(name), noisy] {
            let mut written = Vec::new();
            for dir in &dirs {
                let outcomes = PolicyMode::ALL
                    .iter()
                    .map(|&m| run(&cfg, m))
                    .collect::<Result<Vec<_>, _>>()?;
                let sub = dir
                    .path()
                    .join(format!("{}-{}", cfg.name, config_digest(&cfg)));
                written.push(write_outputs(&cfg, &outcomes, &sub).map_err(|e| e.to_string())?);
            }
            let a = written[0].timelines.iter().chain(&written[0].summaries);
            let b = written[1].timelines.iter().chain(&written[1].summaries);
            for (pa, pb) in a.zip(b) {
                let (ba, bb) = (std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
                ensure!(ba == bb, "{} differs between identical runs", pa.display());
                files += 1;
            }
        }
    }
    Ok(format!(
        "{checked} runs conserve cost to 1e-9; {files} output files byte-identical across reruns"
    ))
}

// ---- 9 ---------------------------------------------------------------------

fn decision_fingerprint(o: &RunOutcome) -> Vec<String> {
    let mut out: Vec<String> = o
        .events
        .iter()
        .map(|e| format!("{:?}@{}#{}", e.kind, e.at.secs(), e.sequence))
        .collect();
    out.extend(
        o.terminations()
            .map(|(r, c, e)| format!("term r{r} {c} {:?}", e.decision)),
    );
    out.extend(o.prewarms.iter().map(|p| {
        format!(
            "pw {} {} {:?} {:?}",
            p.client,
            p.spin_up_start.secs(),
            p.fired_at,
            p.ready_at
        )
    }));
    out.extend(
        o.instances
            .iter()
            .map(|i| format!("inst {} {} {}", i.id, i.client, i.zone)),
    );
    out
}

fn price_scaling() -> Check {
    let mut scenarios = vec![
        bundled("fed-isic-like.json"),
        bundled("mnist-like.json"),
        bundled("faulted.json"),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    scenarios.extend((0..20).map(|k| random_scenario(&mut rng, k).cfg));
    let mut compared = 0;
    for base in &mut scenarios {
        for c in &mut base.clients {
            c.budget = None;
        }
    }
    for base in &scenarios {
        let runs: Vec<RunOutcome> = PolicyMode::ALL
            .iter()
            .map(|&m| run(base, m))
            .collect::<Result<_, _>>()?;
        for k in [0.1, 10.0] {
            let scaled_cfg = base.with_scaled_prices(k);
            for (o, &mode) in runs.iter().zip(PolicyMode::ALL.iter()) {
                let s = run(&scaled_cfg, mode)?;
                ensure!(
                    rel_eq(s.total_cost(), k * o.total_cost(), 1e-9),
                    "{}/{mode} x{k}: {} vs {}",
                    base.name,
                    s.total_cost(),
                    k * o.total_cost()
                );
                for (a, b) in o.ledger.intervals().zip(s.ledger.intervals()) {
                    ensure!(
                        rel_eq(b.cost, k * a.cost, 1e-9) || (a.cost == 0.0 && b.cost == 0.0),
                        "{}/{mode} x{k}: interval cost not scaled",
                        base.name
                    );
                }
                ensure!(
                    decision_fingerprint(o) == decision_fingerprint(&s),
                    "{}/{mode} x{k}: scheduling decisions changed",
                    base.name
                );
                compared += 1;
            }
            let scaled: Vec<f64> = PolicyMode::ALL
                .iter()
                .map(|&m| run(&scaled_cfg, m).map(|o| o.total_cost()))
                .collect::<Result<_, _>>()?;
            let od = runs[2].total_cost();
            for i in 0..2 {
                let before = compute_savings(runs[i].total_cost(), od).unwrap();
                let after = compute_savings(scaled[i], scaled[2]).unwrap();
                ensure!(
                    (before - after).abs() < 1e-9,
                    "{} x{k}: savings {before} -> {after}",
                    base.name
                );
            }
        }
    }
    Ok(format!(
        "{compared} scaled runs: costs x k, savings and decisions unchanged"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 plain-spot savings ratio", plain_spot_ratio),
        ("2 FedCostAware reconstruction", fedcostaware_reconstruction),
        ("3 closed-form cost oracle", closed_form_oracle),
        ("4 termination rule property", termination_property),
        ("5 pre-warm punctuality", punctuality),
        ("6 fault-tolerance adjustment", fault_tolerance),
        ("7 budget adherence", budget_adherence),
        (
            "8 conservation and determinism",
            conservation_and_determinism,
        ),
        ("9 price-scaling invariance", price_scaling),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({secs:.2}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({secs:.2}s) {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
