use std::sync::Arc;

use coin_core::airlineenv::{profit, tickets_sold, AirlineConfig, AirlineEnv};
use coin_core::chance::{m_delta, member_diversity, project, sync_members, ConstraintEvaluation};
use coin_core::cloudenv::{CloudConfig, CloudEnv};
use coin_core::env::{Environment, StartMode, StepInfo};
use coin_core::eval::{build_report, constraint_verdict, EnvKind, RunResult};
use coin_core::nn::{Mlp, OutputKind};
use coin_core::telemetry::{
    generate_dataset, DatasetSpec, TelemetryTrace, TraceDataset, UsageProcess,
};
use coin_core::trainer::{train_with_hook, EpisodeRecord, Method, TrainConfig, TrainHook};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cloud(n_pms: usize, capacity: u32, lifetime: usize, data_seed: u64) -> CloudEnv {
    let cfg = CloudConfig {
        n_pms,
        pm_capacity: capacity,
        horizon: 30,
        vm_lifetime: lifetime,
        ..CloudConfig::default()
    };
    let data = generate_dataset(&DatasetSpec::cloud_benchmark(40, 30, data_seed)).unwrap();
    CloudEnv::new(cfg, Arc::new(data)).unwrap()
}

fn cloud_costs(env: &mut CloudEnv, seed: u64, actions: &[f64]) -> Vec<f64> {
    env.reset(StartMode::Cold, seed).unwrap();
    let mut costs = Vec::new();
    for a in actions {
        costs.push(env.step(*a).unwrap().cost);
    }
    costs
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn dataset_generation_is_deterministic(seed in any::<u64>(), users in 1usize..30) {
        let spec = DatasetSpec::cloud_benchmark(users, 12, seed);
        prop_assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
    }

    #[test]
    fn raising_the_mean_never_lowers_a_sample(
        seed in any::<u64>(),
        base in prop::collection::vec(0.0f64..1.0, 1..40),
        lift in prop::collection::vec(0.0f64..1.0, 40),
        std in 0.0f64..0.5,
        w in prop::option::of(0.0f64..1.0),
        skew in -0.5f64..0.5,
    ) {
        let n = base.len();
        let raised: Vec<f64> = base.iter().zip(&lift).map(|(b, l)| (b + l).min(1.0)).collect();
        let lo = UsageProcess::new(base, vec![std; n], skew, w).unwrap();
        let hi = UsageProcess::new(raised, vec![std; n], skew, w).unwrap();
        let a = lo.sample(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = hi.sample(&mut ChaCha8Rng::seed_from_u64(seed));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y >= x);
            prop_assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn cloud_conserves_virtual_cores_every_step(
        n_pms in 1usize..8,
        capacity in prop::sample::select(vec![8u32, 16, 32]),
        lifetime in 1usize..40,
        seed in any::<u64>(),
        warm in any::<bool>(),
        actions in prop::collection::vec(0.0f64..=1.0, 30),
    ) {
        let mut env = small_cloud(n_pms, capacity, lifetime, 1);
        env.reset(if warm { StartMode::Warm } else { StartMode::Cold }, seed).unwrap();
        for a in actions {
            let tr = env.step(a).unwrap();
            let StepInfo::Cloud(info) = tr.info else { unreachable!() };
            let pms = &env.cluster().pms;
            let virt: f64 = pms.iter().map(|p| p.allocated_virtual).sum();
            prop_assert!((virt - info.promised).abs() <= 1e-9);
            prop_assert!(env.cluster().conservation_gap() <= 1e-9);
            prop_assert!(pms.iter().all(|p| p.reserved <= p.capacity as f64 + 1e-9));
            prop_assert!(info.reserved <= info.promised + 1e-9);
        }
    }

    #[test]
    fn cloud_is_deterministic_given_seed_and_actions(
        seed in any::<u64>(),
        actions in prop::collection::vec(0.0f64..=1.0, 30),
    ) {
        let mut env = small_cloud(4, 16, 10, 2);
        let a = cloud_costs(&mut env, seed, &actions);
        let b = cloud_costs(&mut env, seed, &actions);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn airline_accounting_identity(
        capacity in 1u32..300,
        quarters in 1usize..50,
        base_demand in 0.0f64..500.0,
        seed in any::<u64>(),
        actions in prop::collection::vec(0.0f64..=1.0, 50),
    ) {
        let cfg = AirlineConfig { capacity, quarters, base_demand, ..AirlineConfig::default() };
        let mut env = AirlineEnv::new(cfg).unwrap();
        env.reset(StartMode::Cold, seed).unwrap();
        for a in actions.iter().take(quarters) {
            let StepInfo::Airline(i) = env.step(*a).unwrap().info else { unreachable!() };
            prop_assert_eq!(i.sold, i.onboard + i.offloaded + i.no_shows);
            prop_assert_eq!(i.shows, i.onboard + i.offloaded);
            prop_assert!(i.onboard <= i.capacity);
        }
        prop_assert!(env.is_done());
    }

    #[test]
    fn tickets_sold_is_monotone(capacity in 1u32..500, demand in 0u32..1000, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(tickets_sold(capacity, demand, lo) <= tickets_sold(capacity, demand, hi));
    }

    #[test]
    fn without_no_shows_everyone_flies(seed in any::<u64>(), actions in prop::collection::vec(0.0f64..=1.0, 40)) {
        let cfg = AirlineConfig { initial_no_show: 0.0, no_show_floor: 0.0, ..AirlineConfig::default() };
        let mut env = AirlineEnv::new(cfg).unwrap();
        env.reset(StartMode::Cold, seed).unwrap();
        let demand = env.demand().to_vec();
        for (q, a) in actions.iter().enumerate() {
            let StepInfo::Airline(i) = env.step(*a).unwrap().info else { unreachable!() };
            prop_assert_eq!(i.demand, demand[q]);
            prop_assert_eq!(i.sold, tickets_sold(i.capacity, demand[q], *a));
            prop_assert_eq!(i.shows, i.sold);
            prop_assert_eq!(i.offloaded, i.sold.saturating_sub(i.capacity));
        }
    }

    #[test]
    fn policy_output_in_unit_interval(
        seed in any::<u64>(),
        x in prop::collection::vec(-1e6f64..1e6, 4),
    ) {
        let net = Mlp::new(&[4, 8, 8, 1], OutputKind::Logistic, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let y = net.forward(&x).unwrap();
        prop_assert!((0.0..=1.0).contains(&y));
    }

    #[test]
    fn m_delta_decreasing_in_delta_and_linear_in_sigma(
        sigma in 1e-3f64..100.0,
        k in 0.0f64..50.0,
        d1 in 1e-6f64..0.5,
        d2 in 1e-6f64..0.5,
    ) {
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(m_delta(sigma, lo).unwrap() > m_delta(sigma, hi).unwrap());
        let scaled = m_delta(k * sigma, lo).unwrap();
        let expect = k * m_delta(sigma, lo).unwrap();
        prop_assert!((scaled - expect).abs() <= 1e-9 * expect.abs().max(1e-300));
    }

    #[test]
    fn threshold_ordering_in_delta(
        backward in prop::collection::vec(0.0f64..1.0, 5),
        forward in prop::collection::vec(0.0f64..1.0, 5),
        cost in 0.0f64..1.0,
        g in 0.0f64..1.0,
        d1 in 1e-4f64..0.5,
        d2 in 1e-4f64..0.5,
    ) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let a = ConstraintEvaluation::from_members(&backward, &forward, cost, g, lo).unwrap();
        let b = ConstraintEvaluation::from_members(&backward, &forward, cost, g, hi).unwrap();
        prop_assert!(a.threshold <= b.threshold);
        prop_assert!(!a.feasible || b.feasible);
    }

    #[test]
    fn projection_is_feasible_and_minimal(
        a_raw in 0.0f64..=1.0,
        g in 0.0f64..1.0,
        cost in 0.0f64..1.0,
        vb in 0.0f64..1.0,
        q in 0.0f64..2.0,
        d in prop_oneof![-3.0f64..-1e-3, 1e-3f64..3.0],
    ) {
        let p = project(a_raw, g, cost, vb, q, d, 1.0);
        let rhs = g + cost - vb;
        prop_assert!((0.0..=1.0).contains(&p.action));
        prop_assert!(p.lambda >= 0.0);
        if q <= rhs {
            prop_assert_eq!(p.lambda, 0.0);
            prop_assert_eq!(p.action, a_raw);
        } else {
            // the unclamped solution sits exactly on the boundary
            let unclamped = a_raw - p.lambda * d;
            prop_assert!((q + d * (unclamped - a_raw) - rhs).abs() <= 1e-9);
            if (0.0..=1.0).contains(&unclamped) {
                prop_assert!((p.action - unclamped).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn flat_gradient_under_violation_falls_back(a_raw in 0.0f64..=1.0, fallback in 0.0f64..=1.0) {
        let p = project(a_raw, 0.1, 0.0, 0.5, 0.5, 1e-7, fallback);
        prop_assert!(p.degenerate);
        prop_assert_eq!(p.action, fallback);
    }

    #[test]
    fn sync_keeps_the_centre_and_shrinks_spread(seed in any::<u64>(), rho in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut members: Vec<Mlp> = (0..4)
            .map(|_| Mlp::new(&[3, 5, 1], OutputKind::Identity, &mut rng).unwrap())
            .collect();
        let centre = |ms: &[Mlp]| {
            let ps: Vec<Vec<f64>> = ms.iter().map(|m| m.parameters()).collect();
            (0..ps[0].len()).map(|i| ps.iter().map(|p| p[i]).sum::<f64>() / 4.0).collect::<Vec<f64>>()
        };
        let before = centre(&members);
        let spread = member_diversity(&members);
        sync_members(&mut members, rho).unwrap();
        for (x, y) in before.iter().zip(centre(&members)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((member_diversity(&members) - (1.0 - rho) * spread).abs() <= 1e-9 * spread.max(1.0));
    }

    #[test]
    fn verdict_monotone_in_budget(
        costs in prop::collection::vec(0.0f64..1.0, 1..200),
        g1 in 0.0f64..1.0,
        g2 in 0.0f64..1.0,
        delta in 0.01f64..0.5,
    ) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        if constraint_verdict(&costs, lo, delta).unwrap() {
            prop_assert!(constraint_verdict(&costs, hi, delta).unwrap());
        }
    }

    #[test]
    fn report_is_deterministic(
        runs in prop::collection::vec(
            (0usize..3, any::<u64>(), 0.0f64..100.0, 0.0f64..100.0, prop::collection::vec(0.0f64..1.0, 1..20)),
            1..12,
        ),
    ) {
        let names = ["coin", "bc", "bc_hard"];
        let runs: Vec<RunResult> = runs
            .into_iter()
            .map(|(m, seed, safety, efficiency, episode_costs)| RunResult {
                method: names[m].to_string(),
                seed,
                safety,
                efficiency,
                episode_costs,
            })
            .collect();
        let a = build_report(&runs, EnvKind::Cloud, &[0.75, 0.85, 0.95], 0.05).unwrap();
        let b = build_report(&runs, EnvKind::Cloud, &[0.75, 0.85, 0.95], 0.05).unwrap();
        prop_assert_eq!(a.to_csv(), b.to_csv());
        prop_assert_eq!(a.to_table(), b.to_table());
    }
}

/// Every trace stays at or below `cap`.
fn capped_dataset(cap: f64, seed: u64) -> TraceDataset {
    let mut ds = generate_dataset(&DatasetSpec::cloud_benchmark(40, 30, seed)).unwrap();
    for t in &mut ds.traces {
        for s in &mut t.samples {
            *s = s.min(cap);
        }
    }
    ds
}

#[test]
fn safest_action_is_cost_free_when_usage_stays_below_threshold() {
    for seed in 0..20 {
        let cfg = CloudConfig {
            n_pms: 3,
            pm_capacity: 16,
            horizon: 30,
            ..CloudConfig::default()
        };
        let ds = capped_dataset(cfg.hot_threshold, seed);
        assert!(ds
            .traces
            .iter()
            .all(|t: &TelemetryTrace| t.max_usage() <= cfg.hot_threshold));
        let mut env = CloudEnv::new(cfg, Arc::new(ds)).unwrap();
        let safest = env.safest_action();
        env.reset(StartMode::Cold, seed).unwrap();
        while !env.is_done() {
            assert_eq!(env.step(safest).unwrap().cost, 0.0);
        }
    }
}

/// Mean offloads per quarter at a constant action, over paired seeds.
fn mean_offloads(a: f64, seeds: u64) -> f64 {
    let mut env = AirlineEnv::new(AirlineConfig::default()).unwrap();
    let mut total = 0.0;
    let mut n = 0.0;
    for seed in 0..seeds {
        env.reset(StartMode::Cold, seed).unwrap();
        while !env.is_done() {
            let StepInfo::Airline(i) = env.step(a).unwrap().info else {
                unreachable!()
            };
            total += i.offloaded as f64;
            n += 1.0;
        }
    }
    total / n
}

#[test]
fn expected_offloads_nondecreasing_in_action() {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let means: Vec<f64> = grid.iter().map(|a| mean_offloads(*a, 400)).collect();
    for w in means.windows(2) {
        // 400 seeds x 40 quarters; differences below 0.05 seats are noise
        assert!(w[1] >= w[0] - 0.05, "{means:?}");
    }
    assert!(means[10] > means[0]);
}

#[test]
fn light_overbooking_rarely_offloads() {
    let cfg = AirlineConfig {
        capacity: 100,
        quarters: 100,
        base_demand: 200.0,
        peak_amplitude: 0.0,
        initial_no_show: 0.1,
        no_show_floor: 0.1,
        demand_noise: 0.0,
        ..Default::default()
    };
    let mut env = AirlineEnv::new(cfg).unwrap();
    let (mut total, mut n) = (0.0, 0.0);
    for seed in 0..1000 {
        env.reset(StartMode::Cold, seed).unwrap();
        while !env.is_done() {
            let StepInfo::Airline(i) = env.step(0.1).unwrap().info else {
                unreachable!()
            };
            assert_eq!(i.sold, 110);
            total += i.offloaded as f64;
            n += 1.0;
        }
    }
    assert_eq!(n, 1e5);
    assert!(total / n < 1.5, "mean offloads {}", total / n);
}

/// Mean profit at a constant action, over paired seeds.
fn mean_profit(cfg: &AirlineConfig, a: f64, seeds: u64) -> f64 {
    let mut env = AirlineEnv::new(cfg.clone()).unwrap();
    let mut total = 0.0;
    for seed in 0..seeds {
        env.reset(StartMode::Cold, seed).unwrap();
        let mut infos = Vec::new();
        while !env.is_done() {
            let StepInfo::Airline(i) = env.step(a).unwrap().info else {
                unreachable!()
            };
            infos.push(i);
        }
        total += profit(cfg, &infos).unwrap();
    }
    total / seeds as f64
}

#[test]
fn profit_falls_past_the_offload_knee() {
    let cfg = AirlineConfig::default();
    let curve: Vec<f64> = (0..=50)
        .map(|k| mean_profit(&cfg, k as f64 / 100.0, 200))
        .collect();
    let knee = (0..curve.len())
        .max_by(|i, j| curve[*i].total_cmp(&curve[*j]))
        .unwrap();
    assert!(knee > 0 && knee < 50, "knee {knee}: {curve:?}");
    // neighbours of the knee differ by less than the paired-seed noise
    for w in curve[..knee.saturating_sub(1)].windows(2) {
        assert!(w[1] > w[0], "{curve:?}");
    }
    for w in curve[(knee + 2).min(50)..].windows(2) {
        assert!(w[1] < w[0], "{curve:?}");
    }
}

struct SafeguardAudit {
    steps: usize,
    mismatches: usize,
}

impl TrainHook for SafeguardAudit {
    fn episode(&mut self, _epoch: usize, ep: &EpisodeRecord) -> coin_core::Result<()> {
        for s in &ep.steps {
            self.steps += 1;
            let fired_when_infeasible = match s.evaluation {
                Some(e) => s.safeguard == !e.feasible,
                None => !s.safeguard,
            };
            self.mismatches += !fired_when_infeasible as usize;
        }
        Ok(())
    }
}

#[test]
fn safeguard_fires_iff_infeasible() {
    let cfg = AirlineConfig {
        quarters: 12,
        ..AirlineConfig::default()
    };
    let mut env = AirlineEnv::new(cfg).unwrap();
    let mut tc = TrainConfig {
        method: Method::Coin,
        epochs: 30,
        warmup_epochs: 5,
        hidden: vec![8],
        ..TrainConfig::default()
    };
    tc.chance.horizon = 12;
    tc.chance.g = 0.01;
    let mut audit = SafeguardAudit {
        steps: 0,
        mismatches: 0,
    };
    train_with_hook(&mut env, &tc, &mut audit).unwrap();
    assert_eq!(audit.steps, 30 * 12);
    assert_eq!(audit.mismatches, 0);
}
