//! Metrics, chance-constraint verdicts, benchmark reports and curve files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::airlineenv::{profit, ticket_cost_ratio, AirlineConfig};
use crate::cloudenv::{pm_hot_ratio, saved_cores};
use crate::env::{Environment, StartMode};
use crate::error::{Error, Result};
use crate::trainer::{run_episode, EpisodeRecord, LogRow, TrainedPolicy};

/// Budgets at which reports state a verdict.
pub const REPORT_BUDGETS: [f64; 3] = [0.75, 0.85, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Cloud,
    Airline,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cloud" => Ok(EnvKind::Cloud),
            "airline" => Ok(EnvKind::Airline),
            _ => Err(Error::Config(format!("unknown environment {s}"))),
        }
    }
}

impl EnvKind {
    pub fn safety_metric(&self) -> &'static str {
        match self {
            EnvKind::Cloud => "PM-Hot-R",
            EnvKind::Airline => "Ticket-Cost-R",
        }
    }

    pub fn efficiency_metric(&self) -> &'static str {
        match self {
            EnvKind::Cloud => "S-Cores",
            EnvKind::Airline => "Profit",
        }
    }
}

/// True iff at least a `1 - delta` fraction of episodes keeps its mean cost within `g`.
pub fn constraint_verdict(episode_costs: &[f64], g: f64, delta: f64) -> Result<bool> {
    if episode_costs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta {delta} outside (0, 1)")));
    }
    let within = episode_costs.iter().filter(|c| **c <= g).count();
    // compare counts to avoid rounding in 1 - delta
    Ok(within as f64 >= (1.0 - delta) * episode_costs.len() as f64 - 1e-9)
}

/// Evaluation rollouts of one trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    /// PM-Hot-R or Ticket-Cost-R over the evaluation episodes.
    pub safety: f64,
    /// Mean S-Cores or Profit over the evaluation episodes.
    pub efficiency: f64,
    /// Trajectory-mean cost of every evaluation episode.
    pub episode_costs: Vec<f64>,
}

/// Seed of evaluation episode `i`; disjoint from training episode seeds.
pub fn eval_episode_seed(seed: u64, i: usize) -> u64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    rng.set_word_pos(2 * i as u128);
    rng.random()
}

pub fn rollouts<E: Environment + ?Sized>(
    env: &mut E,
    policy: &TrainedPolicy,
    episodes: usize,
    mode: StartMode,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    if episodes == 0 {
        return Err(Error::Config("need at least one evaluation episode".into()));
    }
    (0..episodes)
        .map(|i| run_episode(env, policy, mode, eval_episode_seed(seed, i)))
        .collect()
}

/// Summarise evaluation episodes of a cloud policy.
pub fn summarize_cloud(method: &str, seed: u64, eps: &[EpisodeRecord]) -> Result<RunResult> {
    let infos: Vec<_> = eps.iter().map(|e| e.cloud_infos()).collect();
    let mut sc = 0.0;
    for i in &infos {
        sc += saved_cores(i)?;
    }
    Ok(RunResult {
        method: method.to_string(),
        seed,
        safety: pm_hot_ratio(&infos)?,
        efficiency: sc / infos.len() as f64,
        episode_costs: eps.iter().map(|e| e.mean_cost()).collect(),
    })
}

/// Summarise evaluation episodes of an airline policy.
pub fn summarize_airline(
    method: &str,
    seed: u64,
    cfg: &AirlineConfig,
    eps: &[EpisodeRecord],
) -> Result<RunResult> {
    let infos: Vec<_> = eps.iter().map(|e| e.airline_infos()).collect();
    let mut p = 0.0;
    for i in &infos {
        p += profit(cfg, i)?;
    }
    Ok(RunResult {
        method: method.to_string(),
        seed,
        safety: ticket_cost_ratio(&infos)?,
        efficiency: p / infos.len() as f64,
        episode_costs: eps.iter().map(|e| e.mean_cost()).collect(),
    })
}

/// Mean and sample standard deviation; the deviation is zero for one value.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub seeds: usize,
    pub safety_mean: f64,
    pub safety_std: f64,
    pub efficiency_mean: f64,
    pub efficiency_std: f64,
    /// `(g, verdict)` over the pooled evaluation episodes of all seeds.
    pub verdicts: Vec<(f64, bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub env: EnvKind,
    pub delta: f64,
    pub rows: Vec<ReportRow>,
}

/// Aggregate runs by method, in order of first appearance.
pub fn build_report(
    runs: &[RunResult],
    env: EnvKind,
    budgets: &[f64],
    delta: f64,
) -> Result<BenchmarkReport> {
    if runs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in runs {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let rows = methods
        .into_iter()
        .map(|m| {
            let group: Vec<&RunResult> = runs.iter().filter(|r| r.method == m).collect();
            let (safety_mean, safety_std) =
                mean_std(&group.iter().map(|r| r.safety).collect::<Vec<_>>());
            let (efficiency_mean, efficiency_std) =
                mean_std(&group.iter().map(|r| r.efficiency).collect::<Vec<_>>());
            let pooled: Vec<f64> = group
                .iter()
                .flat_map(|r| r.episode_costs.iter().copied())
                .collect();
            let verdicts = budgets
                .iter()
                .map(|g| Ok((*g, constraint_verdict(&pooled, *g, delta)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(ReportRow {
                method: m.to_string(),
                seeds: group.len(),
                safety_mean,
                safety_std,
                efficiency_mean,
                efficiency_std,
                verdicts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkReport { env, delta, rows })
}

impl BenchmarkReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "method,seeds,{s}_mean,{s}_std,{e}_mean,{e}_std",
            s = self.env.safety_metric(),
            e = self.env.efficiency_metric()
        );
        if let Some(r) = self.rows.first() {
            for (g, _) in &r.verdicts {
                let _ = write!(out, ",g_{g}");
            }
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                r.method, r.seeds, r.safety_mean, r.safety_std, r.efficiency_mean, r.efficiency_std
            );
            for (_, v) in &r.verdicts {
                out.push_str(if *v { ",pass" } else { ",fail" });
            }
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut header = vec![
            "Method".to_string(),
            self.env.safety_metric().to_string(),
            self.env.efficiency_metric().to_string(),
        ];
        if let Some(r) = self.rows.first() {
            header.extend(r.verdicts.iter().map(|(g, _)| format!("{g}")));
        }
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![
                    r.method.clone(),
                    format!("{:.1} ± {:.1}", r.safety_mean, r.safety_std),
                    format!("{:.1} ± {:.1}", r.efficiency_mean, r.efficiency_std),
                ];
                cells.extend(
                    r.verdicts
                        .iter()
                        .map(|(_, v)| if *v { "✓" } else { "✗" }.to_string()),
                );
                cells
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                std::iter::once(&header)
                    .chain(&body)
                    .map(|row| row[i].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&header).chain(&body) {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Write one curve CSV per method: epoch, MSE, and the average-hot-nodes
/// (cloud) or average-cost (airline) column copied from the training log.
pub fn emit_curves(
    logs: &[(String, Vec<LogRow>)],
    env: EnvKind,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let third = match env {
        EnvKind::Cloud => "average_hot_nodes",
        EnvKind::Airline => "average_cost",
    };
    let mut paths = Vec::new();
    for (method, rows) in logs {
        let path = dir.join(format!("curve_{method}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["epoch", "mse", third])?;
        for r in rows {
            let y = match env {
                EnvKind::Cloud => r.hot_metric,
                EnvKind::Airline => r.mean_cost,
            };
            w.serialize((r.epoch, r.mse, y))?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Mean of `column` over the final `fraction` of the epochs.
pub fn tail_mean(rows: &[LogRow], fraction: f64, column: impl Fn(&LogRow) -> f64) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = ((rows.len() as f64 * fraction).ceil() as usize).clamp(1, rows.len());
    Ok(rows[rows.len() - k..].iter().map(column).sum::<f64>() / k as f64)
}
