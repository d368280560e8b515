use std::sync::Arc;

use coin_core::airlineenv::{AirlineConfig, AirlineEnv};
use coin_core::chance::ChanceConfig;
use coin_core::cloudenv::{CloudConfig, CloudEnv};
use coin_core::env::StartMode;
use coin_core::eval::rollouts;
use coin_core::telemetry::{TelemetryTrace, TraceDataset};
use coin_core::trainer::{episode_seed, run_episode, train, Method, TrainConfig};

fn constant_cloud(usage: f64, horizon: usize) -> CloudEnv {
    let traces = (0..20)
        .map(|i| TelemetryTrace {
            user_id: format!("u{i}"),
            requested: [2, 4, 8][i % 3],
            samples: vec![usage; horizon],
            process: None,
        })
        .collect();
    let data = TraceDataset::new(traces, horizon, None).unwrap();
    let cfg = CloudConfig {
        n_pms: 4,
        pm_capacity: 32,
        horizon,
        ..Default::default()
    };
    CloudEnv::new(cfg, Arc::new(data)).unwrap()
}

fn airline(quarters: usize) -> AirlineEnv {
    AirlineEnv::new(AirlineConfig {
        quarters,
        ..Default::default()
    })
    .unwrap()
}

fn config(
    method: Method,
    horizon: usize,
    epochs: usize,
    g: f64,
    delta: f64,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        method,
        epochs,
        hidden: vec![16],
        warmup_epochs: epochs / 4,
        seed,
        chance: ChanceConfig {
            g,
            delta,
            horizon,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn noiseless_expert_is_imitated_with_projection_inactive() {
    let mut env = constant_cloud(0.5, 10);
    let out = train(&mut env, &config(Method::Coin, 10, 500, 1.0, 0.5, 0)).unwrap();
    assert!(out.aborted.is_none());
    let last = out.log.last().unwrap();
    assert!(last.mse < 1e-3, "final mse {}", last.mse);
    let warmup = out.log.len() / 4;
    assert!(
        out.log[warmup..].iter().all(|r| r.feasibility_rate == 1.0),
        "projection fired under a generous budget"
    );
}

#[test]
fn constant_expert_is_cloned() {
    let mut env = constant_cloud(0.4, 10);
    let cfg = TrainConfig {
        lr_policy: 1e-2,
        ..config(Method::Bc, 10, 1000, 0.85, 0.05, 1)
    };
    let out = train(&mut env, &cfg).unwrap();
    let ep = run_episode(&mut env, &out.policy, StartMode::Cold, 5).unwrap();
    for s in &ep.steps {
        assert!((s.raw_action - 0.4).abs() < 0.01, "output {}", s.raw_action);
    }
}

#[test]
fn zero_budget_lowers_cost_below_bc() {
    let quarters = 12;
    let (mut coin_costs, mut bc_costs) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let mut env = airline(quarters);
        let coin = train(
            &mut env,
            &config(Method::Coin, quarters, 200, 0.0, 0.05, seed),
        )
        .unwrap();
        let bc = train(
            &mut env,
            &config(Method::Bc, quarters, 200, 0.0, 0.05, seed),
        )
        .unwrap();
        let mut cost = |policy| {
            let eps = rollouts(&mut env, policy, 50, StartMode::Cold, seed).unwrap();
            mean(&eps.iter().map(|e| e.mean_cost()).collect::<Vec<_>>())
        };
        coin_costs.push(cost(&coin.policy));
        bc_costs.push(cost(&bc.policy));
    }
    assert!(
        mean(&coin_costs) < mean(&bc_costs),
        "coin {coin_costs:?} bc {bc_costs:?}"
    );
}

#[test]
fn hard_clip_never_exceeds_budget_on_training_episodes() {
    let quarters = 12;
    let g = 0.01;
    let mut env = airline(quarters);
    let cfg = config(Method::BcHard, quarters, 60, g, 0.05, 2);
    let out = train(&mut env, &cfg).unwrap();
    for epoch in 0..cfg.epochs {
        let ep = run_episode(
            &mut env,
            &out.policy,
            cfg.start_mode,
            episode_seed(cfg.seed, epoch),
        )
        .unwrap();
        for s in &ep.steps {
            assert!(s.next_cost <= g, "epoch {epoch}: cost {}", s.next_cost);
        }
    }
}

#[test]
fn hard_clip_with_loose_budget_is_plain_cloning() {
    let quarters = 12;
    let mut env = airline(quarters);
    let hard = train(
        &mut env,
        &config(Method::BcHard, quarters, 40, 1.0, 0.05, 4),
    )
    .unwrap();
    let bc = train(&mut env, &config(Method::Bc, quarters, 40, 1.0, 0.05, 4)).unwrap();
    assert_eq!(hard.log, bc.log);
    for seed in 0..5 {
        let a = run_episode(&mut env, &hard.policy, StartMode::Cold, seed).unwrap();
        let b = run_episode(&mut env, &bc.policy, StartMode::Cold, seed).unwrap();
        let acts = |e: &coin_core::trainer::EpisodeRecord| {
            e.steps.iter().map(|s| s.action).collect::<Vec<_>>()
        };
        assert_eq!(acts(&a), acts(&b));
    }
}

/// Fraction of evaluation episodes whose mean cost exceeds `g`.
fn violation_frequency(env: &mut AirlineEnv, cfg: &TrainConfig, episodes: usize) -> f64 {
    let out = train(env, cfg).unwrap();
    let eps = rollouts(env, &out.policy, episodes, StartMode::Cold, cfg.seed).unwrap();
    eps.iter().filter(|e| e.mean_cost() > cfg.chance.g).count() as f64 / episodes as f64
}

#[test]
fn lowering_delta_does_not_raise_violations() {
    let quarters = 12;
    let g = 0.01;
    let mut diffs = Vec::new();
    for seed in 0..30 {
        let mut env = airline(quarters);
        let strict = violation_frequency(
            &mut env,
            &config(Method::Coin, quarters, 120, g, 0.05, seed),
            50,
        );
        let loose = violation_frequency(
            &mut env,
            &config(Method::Coin, quarters, 120, g, 0.25, seed),
            50,
        );
        diffs.push(strict - loose);
    }
    let m = mean(&diffs);
    let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
    let se = sd / (diffs.len() as f64).sqrt();
    // paired mean difference within two standard errors of zero or below it
    assert!(
        m <= 2.0 * se,
        "mean paired increase {m} (se {se}): {diffs:?}"
    );
}
