use proptest::prelude::*;
use spotfl_core::market::{PreemptionModel, PricePoint, PriceTrace, ProvisioningModel, Zone};
use spotfl_core::scheduler::{
    evaluate_termination, FinishBasis, RoundClient, SchedulerEstimates, TimingObservation,
};
use spotfl_core::workload::StartKind;
use spotfl_core::{
    ClientId, Engine, IntervalState, Ledger, Market, PolicyParams, PricingMode, SimTime,
    TerminationDecision, TimelineInterval,
};

fn trace(points: &[(f64, f64)]) -> PriceTrace {
    let mut t = 0.0;
    let pts = points
        .iter()
        .map(|&(gap, price)| {
            let p = PricePoint {
                effective_from: t,
                spot_price: price,
            };
            t += gap;
            p
        })
        .collect();
    PriceTrace::new("z", pts, 2.0).unwrap()
}

fn calibrated(spin: f64, exec: f64, alpha: f64) -> SchedulerEstimates {
    let mut est = SchedulerEstimates::new(2, alpha);
    let who = [ClientId(0), ClientId(1)].into_iter().collect();
    let obs = |total, execution| TimingObservation { total, execution };
    let r1 = [ClientId(0), ClientId(1)]
        .map(|c| (c, obs(spin + exec, exec)))
        .into_iter()
        .collect();
    let r2 = [ClientId(0), ClientId(1)]
        .map(|c| (c, obs(exec, exec)))
        .into_iter()
        .collect();
    est.calibrate(1, &who, &r1).unwrap();
    est.calibrate(2, &who, &r2).unwrap();
    est
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn termination_matches_predicate(
        fs in 0u32..5000, fi in 0u32..5000, spin in 1u32..600, theta in 0u32..600,
    ) {
        let (fs, fi, spin, theta) = (fs as f64, fi as f64, spin as f64, theta as f64);
        let est = calibrated(spin, 500.0, 0.3);
        let params = PolicyParams { t_threshold: theta, ..PolicyParams::default() };
        let clients = [
            RoundClient { client: ClientId(0), basis: FinishBasis::Known(SimTime::from_secs(fi)) },
            RoundClient { client: ClientId(1), basis: FinishBasis::Known(SimTime::from_secs(fs)) },
        ];
        let eval = evaluate_termination(ClientId(0), SimTime::from_secs(fi), &clients, &params, &est).unwrap();
        let slowest = fs.max(fi);
        let expected = (slowest - fi) - spin > theta;
        prop_assert_eq!(matches!(eval.decision, TerminationDecision::Terminate { .. }), expected);
    }

    #[test]
    fn ema_stays_between_and_converges(
        start in 1.0f64..5000.0, target in 1.0f64..5000.0, alpha in 0.01f64..1.0, steps in 1usize..200,
    ) {
        let mut est = calibrated(100.0, start, alpha);
        let mut prev = start;
        for _ in 0..steps {
            let next = est.update(ClientId(0), target, StartKind::Warm, None).unwrap().epoch_warm.unwrap();
            let (lo, hi) = (prev.min(target), prev.max(target));
            prop_assert!(next >= lo - 1e-9 && next <= hi + 1e-9);
            prop_assert!((next - target).abs() <= (prev - target).abs() + 1e-9);
            prev = next;
        }
        let bound = (1.0 - alpha).powi(steps as i32) * (start - target).abs();
        prop_assert!((prev - target).abs() <= bound + 1e-6);
        // Observing the current estimate leaves it unchanged.
        let again = est.update(ClientId(1), start, StartKind::Warm, None).unwrap().epoch_warm.unwrap();
        prop_assert_eq!(again, start);
    }

    #[test]
    fn billing_partition_conserves_cost(
        steps in proptest::collection::vec((1.0f64..7200.0, 0.01f64..1.9), 1..6),
        from in 0.0f64..20000.0, len in 0.0f64..20000.0, cut in 0.0f64..1.0,
    ) {
        let tr = trace(&steps);
        let (a, c) = (SimTime::from_secs(from), SimTime::from_secs(from + len));
        let b = SimTime::from_secs(from + len * cut);
        let whole = tr.cost(a, c, PricingMode::Spot);
        let parts = tr.cost(a, b, PricingMode::Spot) + tr.cost(b, c, PricingMode::Spot);
        prop_assert!((whole - parts).abs() <= 1e-9 * whole.max(1e-12));
        let segs = tr.segments(a, c, PricingMode::Spot);
        prop_assert_eq!(segs.first().unwrap().start, a);
        prop_assert_eq!(segs.last().unwrap().end, c);
        for w in segs.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
        // Ledger total equals the sum of the intervals recorded from those segments.
        let mut ledger = Ledger::new(1);
        for s in &segs {
            ledger
                .record_interval(TimelineInterval::new(ClientId(0), 1, IntervalState::TrainingWarm, s.start, s.end, s.rate).unwrap())
                .unwrap();
        }
        prop_assert!((ledger.total_cost() - whole).abs() <= 1e-9 * whole.max(1e-12));
    }

    #[test]
    fn cheapest_zone_is_scale_invariant(
        prices in proptest::collection::vec(0.01f64..1.9, 1..6), k in 0.01f64..100.0, t in 0.0f64..1e5,
    ) {
        let ids: Vec<String> = (0..prices.len()).map(|i| format!("z{i}")).collect();
        let build = |factor: f64| {
            let zones = ids
                .iter()
                .zip(&prices)
                .map(|(id, &p)| {
                    let z = Zone { id: id.clone(), instance_type: "gpu".into() };
                    (z, PriceTrace::flat(id.clone(), p * factor, 2.0 * factor).unwrap())
                })
                .collect();
            Market::new(zones, ProvisioningModel::fixed(60.0), PreemptionModel::none()).unwrap()
        };
        let (m1, mk) = (build(1.0), build(k));
        let at = SimTime::from_secs(t);
        let names = || ids.iter().map(String::as_str);
        prop_assert_eq!(m1.cheapest_zone(at, names()).unwrap(), mk.cheapest_zone(at, names()).unwrap());
    }

    #[test]
    fn engine_delivers_in_time_then_fifo(times in proptest::collection::vec(0u8..20, 1..200)) {
        let mut engine = Engine::new();
        for (i, &t) in times.iter().enumerate() {
            engine.schedule(SimTime::from_secs(t as f64), i).unwrap();
        }
        let mut delivered = Vec::new();
        while let Some(d) = engine.pop().unwrap() {
            delivered.push((d.fire_at.secs(), d.payload));
        }
        let mut expected: Vec<(f64, usize)> = times.iter().enumerate().map(|(i, &t)| (t as f64, i)).collect();
        expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        prop_assert_eq!(delivered, expected);
    }

    #[test]
    fn cancelled_events_never_fire(times in proptest::collection::vec(0u8..20, 1..100), mask in any::<u128>()) {
        let mut engine = Engine::new();
        let tickets: Vec<_> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| engine.schedule(SimTime::from_secs(t as f64), i).unwrap())
            .collect();
        for (i, tk) in tickets.iter().enumerate() {
            if mask >> (i % 128) & 1 == 1 {
                prop_assert!(engine.cancel(*tk));
            }
        }
        while let Some(d) = engine.pop().unwrap() {
            prop_assert_eq!(mask >> (d.payload % 128) & 1, 0);
        }
    }
}
