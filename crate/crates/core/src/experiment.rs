//! Experiment configuration and the benchmark driver shared by the CLI and
//! the acceptance suite.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::airlineenv::{AirlineConfig, AirlineEnv};
use crate::cloudenv::{CloudConfig, CloudEnv};
use crate::env::{Environment, StartMode};
use crate::error::{Error, Result};
use crate::eval::{
    build_report, rollouts, summarize_airline, summarize_cloud, BenchmarkReport, EnvKind,
    RunResult, REPORT_BUDGETS,
};
use crate::telemetry::{generate_dataset, load_traces, DatasetSpec, TraceDataset, TraceFormat};
use crate::trainer::{grid_policy, train, LogRow, Method, TrainConfig, TrainedPolicy};

/// Frozen-policy evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub delta: f64,
    /// Budgets at which verdicts are reported.
    pub budgets: Vec<f64>,
    pub start_mode: StartMode,
    /// Offset added to the training seed to derive evaluation episode seeds.
    pub seed_offset: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            delta: 0.05,
            budgets: REPORT_BUDGETS.to_vec(),
            start_mode: StartMode::Cold,
            seed_offset: 1000,
        }
    }
}

/// Everything needed to reproduce a benchmark; loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub cloud: CloudConfig,
    pub airline: AirlineConfig,
    /// Synthetic population used when `data_path` is unset.
    pub data: DatasetSpec,
    /// Trace file (CSV or JSONL) replacing the synthetic population.
    pub data_path: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub grid_rates: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::cloud()
    }
}

impl ExperimentConfig {
    /// Default cloud benchmark: 20 PMs, 200 users, 100 steps.
    pub fn cloud() -> Self {
        let cloud = CloudConfig::default();
        let mut train = TrainConfig {
            epochs: 300,
            ..TrainConfig::default()
        };
        train.chance.g = 0.05;
        train.chance.horizon = cloud.horizon;
        Self {
            env: EnvKind::Cloud,
            data: DatasetSpec::cloud_benchmark(200, cloud.horizon, 7),
            cloud,
            airline: AirlineConfig::default(),
            data_path: None,
            train,
            eval: EvalConfig::default(),
            seeds: (0..10).collect(),
            methods: vec![Method::Coin, Method::Bc, Method::BcHard],
            grid_rates: vec![0.2, 0.4, 0.6],
        }
    }

    /// Default airline benchmark: 40 quarters of one flight.
    pub fn airline() -> Self {
        let airline = AirlineConfig::default();
        let mut cfg = Self::cloud();
        cfg.env = EnvKind::Airline;
        cfg.train.chance.g = 0.01;
        cfg.train.chance.horizon = airline.quarters;
        cfg.airline = airline;
        cfg.grid_rates = vec![0.0, 0.1, 0.2];
        cfg
    }

    pub fn for_env(env: EnvKind) -> Self {
        match env {
            EnvKind::Cloud => Self::cloud(),
            EnvKind::Airline => Self::airline(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn horizon(&self) -> usize {
        match self.env {
            EnvKind::Cloud => self.cloud.horizon,
            EnvKind::Airline => self.airline.quarters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cloud.validate()?;
        self.airline.validate()?;
        self.train.validate()?;
        if self.train.chance.horizon != self.horizon() {
            return Err(Error::Config(format!(
                "train.chance.horizon {} differs from the {:?} horizon {}",
                self.train.chance.horizon,
                self.env,
                self.horizon()
            )));
        }
        if self.env == EnvKind::Cloud && self.data_path.is_none() {
            self.data.validate()?;
            if self.data.horizon < self.cloud.horizon {
                return Err(Error::Config(
                    "data.horizon is shorter than the cloud horizon".into(),
                ));
            }
        }
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be >= 1".into()));
        }
        if !(self.eval.delta > 0.0 && self.eval.delta < 1.0) {
            return Err(Error::Config("eval.delta must lie in (0, 1)".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.grid_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("grid rates must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Trace population for the cloud environment.
    pub fn dataset(&self) -> Result<TraceDataset> {
        match &self.data_path {
            Some(p) => load_traces(p, TraceFormat::from_path(p)?),
            None => generate_dataset(&self.data),
        }
    }

    /// Fresh environment; `data` is required for the cloud environment.
    pub fn build_env(
        &self,
        data: Option<Arc<TraceDataset>>,
    ) -> Result<Box<dyn Environment + Send>> {
        Ok(match self.env {
            EnvKind::Cloud => {
                let data = match data {
                    Some(d) => d,
                    None => Arc::new(self.dataset()?),
                };
                Box::new(CloudEnv::new(self.cloud.clone(), data)?)
            }
            EnvKind::Airline => Box::new(AirlineEnv::new(self.airline.clone())?),
        })
    }

    /// Summarise evaluation rollouts of a frozen policy.
    pub fn evaluate(
        &self,
        env: &mut dyn Environment,
        policy: &TrainedPolicy,
        name: &str,
        seed: u64,
    ) -> Result<RunResult> {
        let eps = rollouts(
            env,
            policy,
            self.eval.episodes,
            self.eval.start_mode,
            seed.wrapping_add(self.eval.seed_offset),
        )?;
        match self.env {
            EnvKind::Cloud => summarize_cloud(name, seed, &eps),
            EnvKind::Airline => summarize_airline(name, seed, &self.airline, &eps),
        }
    }
}

/// One trained and evaluated policy.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: Method,
    pub seed: u64,
    pub policy: TrainedPolicy,
    pub log: Vec<LogRow>,
    pub result: RunResult,
    pub aborted: Option<String>,
}

/// Train `method` with `seed` and evaluate the result.
pub fn run_one(
    cfg: &ExperimentConfig,
    data: Option<Arc<TraceDataset>>,
    method: Method,
    seed: u64,
) -> Result<RunOutput> {
    let mut env = cfg.build_env(data)?;
    let tc = TrainConfig {
        method,
        seed,
        ..cfg.train.clone()
    };
    let out = train(env.as_mut(), &tc)?;
    let result = cfg.evaluate(env.as_mut(), &out.policy, method.name(), seed)?;
    Ok(RunOutput {
        method,
        seed,
        policy: out.policy,
        log: out.log,
        result,
        aborted: out.aborted,
    })
}

/// Trained methods across seeds plus the grid baselines.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub runs: Vec<RunOutput>,
    pub grid: Vec<RunResult>,
    pub report: BenchmarkReport,
}

impl Benchmark {
    /// Per-epoch mean of each method's training logs across seeds.
    pub fn mean_logs(&self) -> Vec<(String, Vec<LogRow>)> {
        let mut methods: Vec<Method> = Vec::new();
        for r in &self.runs {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        methods
            .into_iter()
            .map(|m| {
                let logs: Vec<&Vec<LogRow>> = self
                    .runs
                    .iter()
                    .filter(|r| r.method == m)
                    .map(|r| &r.log)
                    .collect();
                (m.name().to_string(), mean_log(&logs))
            })
            .collect()
    }
}

/// Per-epoch mean over logs, truncated to the shortest log.
pub fn mean_log(logs: &[&Vec<LogRow>]) -> Vec<LogRow> {
    let len = logs.iter().map(|l| l.len()).min().unwrap_or(0);
    let n = logs.len() as f64;
    (0..len)
        .map(|i| {
            let avg = |f: fn(&LogRow) -> f64| logs.iter().map(|l| f(&l[i])).sum::<f64>() / n;
            LogRow {
                epoch: logs[0][i].epoch,
                mse: avg(|r| r.mse),
                mean_cost: avg(|r| r.mean_cost),
                hot_metric: avg(|r| r.hot_metric),
                feasibility_rate: avg(|r| r.feasibility_rate),
                sigma_mean: avg(|r| r.sigma_mean),
            }
        })
        .collect()
}

/// Train and evaluate every configured method on every seed, using up to
/// `jobs` worker threads. Results are ordered by method then seed regardless
/// of scheduling.
pub fn run_benchmark(cfg: &ExperimentConfig, jobs: usize) -> Result<Benchmark> {
    cfg.validate()?;
    let data = match cfg.env {
        EnvKind::Cloud => Some(Arc::new(cfg.dataset()?)),
        EnvKind::Airline => None,
    };
    let tasks: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .filter(|m| **m != Method::Grid)
        .flat_map(|m| cfg.seeds.iter().map(move |s| (*m, *s)))
        .collect();
    let runs = parallel_map(&tasks, jobs, |(m, s)| run_one(cfg, data.clone(), *m, *s))?;

    let mut grid = Vec::new();
    for rate in &cfg.grid_rates {
        let mut env = cfg.build_env(data.clone())?;
        let name = format!("grid-{rate}");
        grid.push(cfg.evaluate(env.as_mut(), &grid_policy(*rate)?, &name, cfg.seeds[0])?);
    }

    let results: Vec<RunResult> = runs
        .iter()
        .map(|r| r.result.clone())
        .chain(grid.iter().cloned())
        .collect();
    let report = build_report(&results, cfg.env, &cfg.eval.budgets, cfg.eval.delta)?;
    Ok(Benchmark { runs, grid, report })
}

/// Order-preserving map over `items` on at most `jobs` threads.
pub fn parallel_map<T, U, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<U>>> = (0..items.len()).map(|_| None).collect();
    let collected = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                collected.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every item is processed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::airline();
        cfg.airline.quarters = 8;
        cfg.train.chance.horizon = 8;
        cfg.train.epochs = 3;
        cfg.train.warmup_epochs = 1;
        cfg.train.hidden = vec![4];
        cfg.eval.episodes = 5;
        cfg.seeds = vec![0, 1];
        cfg
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::cloud().validate().unwrap();
        ExperimentConfig::airline().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::airline();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn horizon_mismatch_rejected() {
        let mut cfg = ExperimentConfig::cloud();
        cfg.train.chance.horizon = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn benchmark_independent_of_jobs() {
        let cfg = tiny();
        let a = run_benchmark(&cfg, 1).unwrap();
        let b = run_benchmark(&cfg, 3).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.runs.len(), 6);
        assert_eq!(a.report.rows.len(), 6);
        assert_eq!(a.mean_logs().len(), 3);
        assert_eq!(a.mean_logs()[0].1.len(), 3);
    }

    #[test]
    fn parallel_map_keeps_order_and_errors() {
        let v: Vec<usize> = (0..20).collect();
        let out = parallel_map(&v, 4, |x| Ok(x * 2)).unwrap();
        assert_eq!(out, (0..20).map(|x| x * 2).collect::<Vec<_>>());
        let err = parallel_map(&v, 4, |x| {
            if *x == 7 {
                Err(Error::Value("seven".into()))
            } else {
                Ok(*x)
            }
        });
        assert!(err.is_err());
    }
}
