//! Resource-usage telemetry: synthetic generation, trace files, and
//! expert-variance diagnostics.
//!
//! A trace is one user's usage rate (fraction of the requested resource in
//! use) at every step of the horizon. Synthetic traces draw each step
//! independently from a [`UsageProcess`], a Gaussian with an optional second
//! mixture component, clamped to `[0, 1]`.
//!
//! Trace files use the schema `user_id,timestamp,requested,usage_rate`
//! (CSV with header, or JSONL with the same four keys per line).

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step generating distribution of one user's usage rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageProcess {
    pub mean_curve: Vec<f64>,
    pub std_curve: Vec<f64>,
    /// Mean shift of the second mixture component.
    pub skew: f64,
    /// Probability of drawing from the shifted component.
    pub mixture_weight: Option<f64>,
}

impl UsageProcess {
    pub fn new(
        mean_curve: Vec<f64>,
        std_curve: Vec<f64>,
        skew: f64,
        mixture_weight: Option<f64>,
    ) -> Result<Self> {
        let p = Self {
            mean_curve,
            std_curve,
            skew,
            mixture_weight,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn constant(mean: f64, std: f64, horizon: usize) -> Result<Self> {
        Self::new(vec![mean; horizon], vec![std; horizon], 0.0, None)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean_curve.len() != self.std_curve.len() {
            return Err(Error::Config(format!(
                "mean curve has {} steps, std curve {}",
                self.mean_curve.len(),
                self.std_curve.len()
            )));
        }
        if let Some(m) = self.mean_curve.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(Error::Config(format!("mean usage {m} outside [0, 1]")));
        }
        if let Some(s) = self
            .std_curve
            .iter()
            .find(|s| !(**s >= 0.0 && s.is_finite()))
        {
            return Err(Error::Config(format!("negative or non-finite std {s}")));
        }
        if let Some(w) = self.mixture_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("mixture weight {w} outside [0, 1]")));
            }
        }
        if !self.skew.is_finite() {
            return Err(Error::Config("skew must be finite".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.mean_curve.len()
    }

    /// One draw per step. Each step consumes exactly one uniform and one
    /// standard normal, so the draw sequence does not depend on the curves.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let w = self.mixture_weight.unwrap_or(0.0);
        self.mean_curve
            .iter()
            .zip(&self.std_curve)
            .map(|(m, s)| {
                let u: f64 = rng.random();
                let z: f64 = StandardNormal.sample(rng);
                let shift = if u < w { self.skew } else { 0.0 };
                (m + shift + s * z).clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// One user's usage time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryTrace {
    pub user_id: String,
    /// Requested resource units (cores or seats).
    pub requested: u32,
    pub samples: Vec<f64>,
    /// Generating process; absent for loaded traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<UsageProcess>,
}

impl TelemetryTrace {
    pub fn mean_usage(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    pub fn max_usage(&self) -> f64 {
        self.samples.iter().copied().fold(0.0, f64::max)
    }
}

/// A set of traces sharing one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDataset {
    pub traces: Vec<TelemetryTrace>,
    pub horizon: usize,
    pub seed: Option<u64>,
}

impl TraceDataset {
    pub fn new(traces: Vec<TelemetryTrace>, horizon: usize, seed: Option<u64>) -> Result<Self> {
        let ds = Self {
            traces,
            horizon,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.traces {
            if !seen.insert(t.user_id.as_str()) {
                return Err(Error::Schema(format!("duplicate user_id {}", t.user_id)));
            }
            if t.samples.len() != self.horizon {
                return Err(Error::Schema(format!(
                    "user {} has {} samples, horizon is {}",
                    t.user_id,
                    t.samples.len(),
                    self.horizon
                )));
            }
            if let Some(u) = t.samples.iter().find(|u| !(0.0..=1.0).contains(*u)) {
                return Err(Error::Value(format!(
                    "user {} has usage {u} outside [0, 1]",
                    t.user_id
                )));
            }
            if t.requested == 0 {
                return Err(Error::Value(format!(
                    "user {} requests zero units",
                    t.user_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

/// Template for one family of users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRegime {
    pub name: String,
    /// Share of users drawn from this regime; shares must sum to 1.
    pub proportion: f64,
    /// Baseline mean usage.
    pub mean: f64,
    pub std: f64,
    /// Per-user baseline offset drawn uniformly from `[-mean_jitter, mean_jitter]`.
    #[serde(default)]
    pub mean_jitter: f64,
    /// Amplitude of a sinusoidal daily pattern added to the mean.
    #[serde(default)]
    pub daily_amplitude: f64,
    /// Period of the daily pattern, in steps.
    #[serde(default = "default_period")]
    pub daily_period: usize,
    #[serde(default)]
    pub skew: f64,
    #[serde(default)]
    pub mixture_weight: Option<f64>,
    /// Candidate request sizes, chosen uniformly.
    #[serde(default = "default_requested")]
    pub requested: Vec<u32>,
}

fn default_period() -> usize {
    24
}

fn default_requested() -> Vec<u32> {
    vec![2, 4, 8, 16]
}

impl UsageRegime {
    pub fn constant(name: &str, proportion: f64, mean: f64, std: f64) -> Self {
        Self {
            name: name.to_string(),
            proportion,
            mean,
            std,
            mean_jitter: 0.0,
            daily_amplitude: 0.0,
            daily_period: default_period(),
            skew: 0.0,
            mixture_weight: None,
            requested: default_requested(),
        }
    }

    fn process<R: Rng + ?Sized>(&self, horizon: usize, rng: &mut R) -> Result<UsageProcess> {
        let offset = if self.mean_jitter > 0.0 {
            rng.random_range(-self.mean_jitter..=self.mean_jitter)
        } else {
            0.0
        };
        let phase = if self.daily_amplitude > 0.0 {
            rng.random_range(0.0..std::f64::consts::TAU)
        } else {
            0.0
        };
        let period = self.daily_period.max(1) as f64;
        let mean_curve = (0..horizon)
            .map(|t| {
                let daily = self.daily_amplitude
                    * (std::f64::consts::TAU * t as f64 / period + phase).sin();
                (self.mean + offset + daily).clamp(0.0, 1.0)
            })
            .collect();
        UsageProcess::new(
            mean_curve,
            vec![self.std; horizon],
            self.skew,
            self.mixture_weight,
        )
    }
}

/// Parameters for [`generate_dataset`]; loadable from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_users: usize,
    pub horizon: usize,
    pub seed: u64,
    pub regimes: Vec<UsageRegime>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users < 1 {
            return Err(Error::Config("n_users must be >= 1".into()));
        }
        if self.horizon < 2 {
            return Err(Error::Config("horizon must be >= 2".into()));
        }
        if self.regimes.is_empty() {
            return Err(Error::Config(
                "at least one usage regime is required".into(),
            ));
        }
        if self.regimes.iter().any(|r| !(r.proportion >= 0.0)) {
            return Err(Error::Config(
                "regime proportions must be non-negative".into(),
            ));
        }
        let total: f64 = self.regimes.iter().map(|r| r.proportion).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "regime proportions sum to {total}, expected 1"
            )));
        }
        for r in &self.regimes {
            if r.requested.is_empty() || r.requested.contains(&0) {
                return Err(Error::Config(format!(
                    "regime {} needs positive request sizes",
                    r.name
                )));
            }
            if !(0.0..=1.0).contains(&r.mean) || !(r.std >= 0.0) {
                return Err(Error::Config(format!(
                    "regime {} has invalid mean/std",
                    r.name
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Default synthetic cloud benchmark population.
    pub fn cloud_benchmark(n_users: usize, horizon: usize, seed: u64) -> Self {
        let regime = |name: &str, proportion, mean, std, jitter, amplitude, requested: Vec<u32>| {
            UsageRegime {
                name: name.to_string(),
                proportion,
                mean,
                std,
                mean_jitter: jitter,
                daily_amplitude: amplitude,
                daily_period: 24,
                skew: 0.0,
                mixture_weight: None,
                requested,
            }
        };
        let mut bursty = regime("bursty", 0.25, 0.45, 0.12, 0.1, 0.0, vec![2, 4, 8]);
        bursty.skew = 0.3;
        bursty.mixture_weight = Some(0.15);
        Self {
            n_users,
            horizon,
            seed,
            regimes: vec![
                regime("idle", 0.35, 0.15, 0.05, 0.05, 0.0, vec![2, 4, 8, 16]),
                regime("diurnal", 0.40, 0.40, 0.08, 0.1, 0.15, vec![2, 4, 8, 16]),
                bursty,
            ],
        }
    }
}

/// Generate a synthetic dataset. User `i` draws everything from its own
/// ChaCha stream `(seed, i)`, so generation is deterministic and
/// order-independent.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<TraceDataset> {
    spec.validate()?;
    let traces = (0..spec.n_users)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let regime = spec
                .regimes
                .iter()
                .find(|r| {
                    acc += r.proportion;
                    u < acc
                })
                .unwrap_or_else(|| spec.regimes.last().unwrap());
            let requested = regime.requested[rng.random_range(0..regime.requested.len())];
            let process = regime.process(spec.horizon, &mut rng)?;
            let samples = process.sample(&mut rng);
            Ok(TelemetryTrace {
                user_id: format!("u{i:05}"),
                requested,
                samples,
                process: Some(process),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TraceDataset::new(traces, spec.horizon, Some(spec.seed))
}

/// Trace file encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

impl TraceFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(Self::Csv),
            Some("jsonl") | Some("ndjson") => Ok(Self::Jsonl),
            other => Err(Error::Config(format!(
                "cannot infer trace format from extension {other:?}"
            ))),
        }
    }
}

impl std::str::FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            _ => Err(Error::Config(format!("unknown trace format {s}"))),
        }
    }
}

/// One row of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub user_id: String,
    pub timestamp: usize,
    pub requested: u32,
    pub usage_rate: f64,
}

fn records(ds: &TraceDataset) -> impl Iterator<Item = TraceRecord> + '_ {
    ds.traces.iter().flat_map(|t| {
        t.samples
            .iter()
            .enumerate()
            .map(move |(step, u)| TraceRecord {
                user_id: t.user_id.clone(),
                timestamp: step,
                requested: t.requested,
                usage_rate: *u,
            })
    })
}

pub fn save_traces(ds: &TraceDataset, path: &Path, format: TraceFormat) -> Result<()> {
    match format {
        TraceFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for r in records(ds) {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        TraceFormat::Jsonl => {
            let mut w = BufWriter::new(File::create(path)?);
            for r in records(ds) {
                serde_json::to_writer(&mut w, &r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn load_traces(path: &Path, format: TraceFormat) -> Result<TraceDataset> {
    let rows: Vec<TraceRecord> = match format {
        TraceFormat::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            r.deserialize().collect::<std::result::Result<_, _>>()?
        }
        TraceFormat::Jsonl => {
            let mut rows = Vec::new();
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                rows.push(
                    serde_json::from_str(&line)
                        .map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?,
                );
            }
            rows
        }
    };
    traces_from_records(rows)
}

/// User id, requested cores and (timestamp, usage) rows.
type UserRows = (String, u32, Vec<(usize, f64)>);

/// Group rows by user (first-appearance order), sort by timestamp and
/// validate a uniform contiguous horizon.
pub fn traces_from_records(rows: Vec<TraceRecord>) -> Result<TraceDataset> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut grouped: Vec<UserRows> = Vec::new();
    for r in rows {
        if !(0.0..=1.0).contains(&r.usage_rate) {
            return Err(Error::Value(format!(
                "user {} step {}: usage {} outside [0, 1]",
                r.user_id, r.timestamp, r.usage_rate
            )));
        }
        let slot = *index.entry(r.user_id.clone()).or_insert_with(|| {
            grouped.push((r.user_id.clone(), r.requested, Vec::new()));
            grouped.len() - 1
        });
        let entry = &mut grouped[slot];
        if entry.1 != r.requested {
            return Err(Error::Schema(format!(
                "user {} changes requested units from {} to {}",
                r.user_id, entry.1, r.requested
            )));
        }
        entry.2.push((r.timestamp, r.usage_rate));
    }
    let horizon = grouped[0].2.len();
    let mut traces = Vec::with_capacity(grouped.len());
    for (user_id, requested, mut points) in grouped {
        if points.len() != horizon {
            return Err(Error::Schema(format!(
                "user {user_id} has {} readings, expected horizon {horizon}",
                points.len()
            )));
        }
        points.sort_by_key(|p| p.0);
        if points.iter().enumerate().any(|(i, p)| p.0 != i) {
            return Err(Error::Schema(format!(
                "user {user_id} timestamps are not 0..{horizon} without gaps"
            )));
        }
        traces.push(TelemetryTrace {
            user_id,
            requested,
            samples: points.into_iter().map(|p| p.1).collect(),
            process: None,
        });
    }
    TraceDataset::new(traces, horizon, None)
}

/// Per-step cross-user sample variance (`n - 1` denominator) of usage rates.
pub fn empirical_expert_variance(ds: &TraceDataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.len() < 2 {
        return Err(Error::Value("variance needs at least two users".into()));
    }
    let n = ds.len() as f64;
    Ok((0..ds.horizon)
        .map(|t| {
            let mean = ds.traces.iter().map(|tr| tr.samples[t]).sum::<f64>() / n;
            ds.traces
                .iter()
                .map(|tr| (tr.samples[t] - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        })
        .collect())
}
