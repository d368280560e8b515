//! Cloud vCPU oversubscription environment.
//!
//! Users from a [`TraceDataset`] arrive over the episode and request VMs.
//! The action `a` is the predicted usage rate of the requests arriving this
//! step: each admitted VM promises `requested` cores to its user but reserves
//! only `requested * max(a, a_floor)` physical cores. Placement is best-fit
//! decreasing on remaining physical capacity; requests that do not fit wait
//! in a pending queue and are re-admitted at the next step's rate.
//!
//! A PM is hot when the instantaneous usage of its VMs (usage rate times
//! requested cores, read from the traces) exceeds `hot_threshold` of its
//! capacity. The default cost `c(s) = h . s` selects the hot-PM fraction.
//!
//! Feature layout of `s_t` (`W` = `history_window`):
//!
//! | index | feature |
//! |---|---|
//! | 0 | cores requested by arriving and pending requests / total capacity |
//! | 1..=W | cluster utilisation history, most recent first |
//! | W+1 | hot-PM fraction |
//! | W+2 | free physical capacity fraction |
//! | W+3..=W+5 | share of arriving cores from low / mid / high usage bands |
//! | W+6 | core-weighted historical mean usage of arriving requests |
//! | W+7 | elapsed fraction of the episode |

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{CloudStepInfo, Environment, StartMode, StepInfo, Transition};
use crate::error::{Error, Result};
use crate::telemetry::TraceDataset;

/// Environment configuration; every key may appear in a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudConfig {
    pub n_pms: usize,
    pub pm_capacity: u32,
    pub hot_threshold: f64,
    pub horizon: usize,
    /// Fraction of physical capacity pre-allocated on warm start.
    pub warm_fill: f64,
    /// Smallest reservation rate ever applied.
    pub a_floor: f64,
    /// Largest promised-to-reserved ratio.
    pub max_oversub_factor: f64,
    pub history_window: usize,
    /// Steps a placed VM keeps running.
    pub vm_lifetime: usize,
    /// Cost projection `h`; `None` selects the hot-PM fraction.
    pub cost_vector: Option<Vec<f64>>,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            n_pms: 20,
            pm_capacity: 32,
            hot_threshold: 0.95,
            horizon: 100,
            warm_fill: 0.0,
            a_floor: 0.1,
            max_oversub_factor: 10.0,
            history_window: 10,
            vm_lifetime: 30,
            cost_vector: None,
        }
    }
}

/// Number of usage bands in the demand summary.
pub const USAGE_BANDS: usize = 3;

impl CloudConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pms == 0 || self.pm_capacity == 0 {
            return Err(Error::Config(
                "need at least one PM with positive capacity".into(),
            ));
        }
        if !(self.hot_threshold > 0.0 && self.hot_threshold < 1.0) {
            return Err(Error::Config(format!(
                "hot_threshold {} outside (0, 1)",
                self.hot_threshold
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warm_fill) {
            return Err(Error::Config(format!(
                "warm_fill {} outside [0, 1)",
                self.warm_fill
            )));
        }
        if !(self.a_floor > 0.0 && self.a_floor <= 1.0) {
            return Err(Error::Config(format!(
                "a_floor {} outside (0, 1]",
                self.a_floor
            )));
        }
        if !(self.max_oversub_factor >= 1.0) {
            return Err(Error::Config("max_oversub_factor must be >= 1".into()));
        }
        if self.vm_lifetime == 0 {
            return Err(Error::Config("vm_lifetime must be positive".into()));
        }
        if let Some(h) = &self.cost_vector {
            if h.len() != self.feature_dim() {
                return Err(Error::Config(format!(
                    "cost_vector has {} entries, state has {}",
                    h.len(),
                    self.feature_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn feature_dim(&self) -> usize {
        self.history_window + 8
    }

    pub fn hot_feature(&self) -> usize {
        self.history_window + 1
    }

    pub fn total_capacity(&self) -> f64 {
        self.n_pms as f64 * self.pm_capacity as f64
    }

    /// Reservation rate actually applied for action `a`.
    pub fn effective_rate(&self, a: f64) -> f64 {
        a.max(self.a_floor)
            .max(1.0 / self.max_oversub_factor)
            .min(1.0)
    }

    pub fn cost_vector(&self) -> Vec<f64> {
        self.cost_vector.clone().unwrap_or_else(|| {
            let mut h = vec![0.0; self.feature_dim()];
            h[self.hot_feature()] = 1.0;
            h
        })
    }
}

/// One physical machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmState {
    pub capacity: u32,
    /// Physical cores reserved by placed VMs.
    pub reserved: f64,
    /// Cores promised to the VMs placed here.
    pub allocated_virtual: f64,
    pub instantaneous_usage: f64,
    pub hot: bool,
}

impl PmState {
    fn empty(capacity: u32) -> Self {
        Self {
            capacity,
            reserved: 0.0,
            allocated_virtual: 0.0,
            instantaneous_usage: 0.0,
            hot: false,
        }
    }

    pub fn free(&self) -> f64 {
        self.capacity as f64 - self.reserved
    }
}

/// Chooses a PM for a reservation.
pub trait Allocator: Send + Sync {
    fn choose(&self, pms: &[PmState], demand: f64) -> Option<usize>;
}

/// Tightest remaining capacity that still fits; ties go to the lowest index.
#[derive(Debug, Clone, Copy, Default)]
pub struct BestFit;

const FIT_EPS: f64 = 1e-9;

impl Allocator for BestFit {
    fn choose(&self, pms: &[PmState], demand: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, pm) in pms.iter().enumerate() {
            let slack = pm.free() - demand;
            if slack >= -FIT_EPS && best.is_none_or(|(_, s)| slack < s) {
                best = Some((i, slack));
            }
        }
        best.map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Vm {
    user: usize,
    requested: u32,
    reserved: f64,
    pm: usize,
    /// First step at which the VM is gone.
    end: usize,
}

/// Full mutable state of the cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub pms: Vec<PmState>,
    vms: Vec<Vm>,
    /// Users waiting for placement.
    pub pending: VecDeque<usize>,
    pub step: usize,
    admitted_virtual: f64,
}

impl ClusterState {
    fn new(cfg: &CloudConfig) -> Self {
        Self {
            pms: vec![PmState::empty(cfg.pm_capacity); cfg.n_pms],
            vms: Vec::new(),
            pending: VecDeque::new(),
            step: 0,
            admitted_virtual: 0.0,
        }
    }

    pub fn running_vms(&self) -> usize {
        self.vms.len()
    }

    pub fn reserved(&self) -> f64 {
        self.vms.iter().map(|v| v.reserved).sum()
    }

    pub fn promised(&self) -> f64 {
        self.vms.iter().map(|v| v.requested as f64).sum()
    }

    /// `|sum of per-PM promised cores - sum over running VMs|`.
    pub fn conservation_gap(&self) -> f64 {
        let per_pm: f64 = self.pms.iter().map(|p| p.allocated_virtual).sum();
        (per_pm - self.admitted_virtual)
            .abs()
            .max((per_pm - self.promised()).abs())
    }

    fn depart(&mut self, step: usize) {
        let pms = &mut self.pms;
        let mut gone = 0.0;
        self.vms.retain(|vm| {
            if vm.end <= step {
                pms[vm.pm].reserved -= vm.reserved;
                pms[vm.pm].allocated_virtual -= vm.requested as f64;
                gone += vm.requested as f64;
                false
            } else {
                true
            }
        });
        self.admitted_virtual -= gone;
        for pm in pms.iter_mut() {
            // keep exact zeros once a PM empties
            if pm.reserved.abs() < FIT_EPS {
                pm.reserved = 0.0;
            }
            if pm.allocated_virtual.abs() < FIT_EPS {
                pm.allocated_virtual = 0.0;
            }
        }
    }

    fn place(
        &mut self,
        allocator: &dyn Allocator,
        user: usize,
        requested: u32,
        reserved: f64,
        end: usize,
    ) -> bool {
        match allocator.choose(&self.pms, reserved) {
            Some(pm) => {
                self.pms[pm].reserved += reserved;
                self.pms[pm].allocated_virtual += requested as f64;
                self.admitted_virtual += requested as f64;
                self.vms.push(Vm {
                    user,
                    requested,
                    reserved,
                    pm,
                    end,
                });
                true
            }
            None => false,
        }
    }

    fn refresh_usage(&mut self, usage_of: impl Fn(&Vm) -> f64, hot_threshold: f64) {
        for pm in &mut self.pms {
            pm.instantaneous_usage = 0.0;
        }
        for vm in &self.vms {
            self.pms[vm.pm].instantaneous_usage += usage_of(vm) * vm.requested as f64;
        }
        for pm in &mut self.pms {
            pm.hot = pm.instantaneous_usage / pm.capacity as f64 > hot_threshold;
        }
    }

    pub fn hot_fraction(&self) -> f64 {
        self.pms.iter().filter(|p| p.hot).count() as f64 / self.pms.len() as f64
    }
}

/// The cloud oversubscription environment.
pub struct CloudEnv {
    cfg: CloudConfig,
    data: Arc<TraceDataset>,
    allocator: Box<dyn Allocator>,
    user_mean: Vec<f64>,
    user_max: Vec<f64>,
    cluster: ClusterState,
    arrivals: Vec<Vec<usize>>,
    history: VecDeque<f64>,
    features: Vec<f64>,
    cost: f64,
    h: Vec<f64>,
}

impl CloudEnv {
    pub fn new(cfg: CloudConfig, data: Arc<TraceDataset>) -> Result<Self> {
        Self::with_allocator(cfg, data, Box::new(BestFit))
    }

    pub fn with_allocator(
        cfg: CloudConfig,
        data: Arc<TraceDataset>,
        allocator: Box<dyn Allocator>,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.horizon < cfg.horizon {
            return Err(Error::Config(format!(
                "traces cover {} steps, environment horizon is {}",
                data.horizon, cfg.horizon
            )));
        }
        let user_mean = data.traces.iter().map(|t| t.mean_usage()).collect();
        let user_max = data.traces.iter().map(|t| t.max_usage()).collect();
        let h = cfg.cost_vector();
        let mut env = Self {
            cluster: ClusterState::new(&cfg),
            cfg,
            data,
            allocator,
            user_mean,
            user_max,
            arrivals: Vec::new(),
            history: VecDeque::new(),
            features: Vec::new(),
            cost: 0.0,
            h,
        };
        env.reset(StartMode::Cold, 0)?;
        Ok(env)
    }

    pub fn config(&self) -> &CloudConfig {
        &self.cfg
    }

    pub fn cluster(&self) -> &ClusterState {
        &self.cluster
    }

    pub fn dataset(&self) -> &TraceDataset {
        &self.data
    }

    /// Names of the features in order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = vec!["arriving_cores".to_string()];
        names.extend((0..self.cfg.history_window).map(|k| format!("utilisation_lag_{k}")));
        names.extend(
            [
                "hot_fraction",
                "free_capacity",
                "arriving_low_band",
                "arriving_mid_band",
                "arriving_high_band",
                "arriving_mean_usage",
                "elapsed",
            ]
            .map(String::from),
        );
        names
    }

    /// Users requesting a VM at the current step: pending first, then new arrivals.
    fn candidates(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.cluster.pending.iter().copied().collect();
        if let Some(new) = self.arrivals.get(self.cluster.step) {
            c.extend(new);
        }
        c
    }

    fn band(mean: f64) -> usize {
        ((mean * USAGE_BANDS as f64) as usize).min(USAGE_BANDS - 1)
    }

    fn build_features(&self) -> Vec<f64> {
        let cap = self.cfg.total_capacity();
        let candidates = if self.cluster.step < self.cfg.horizon {
            self.candidates()
        } else {
            Vec::new()
        };
        let cores: f64 = candidates
            .iter()
            .map(|u| self.data.traces[*u].requested as f64)
            .sum();
        let mut f = Vec::with_capacity(self.cfg.feature_dim());
        f.push(cores / cap);
        for k in 0..self.cfg.history_window {
            f.push(self.history.get(k).copied().unwrap_or(0.0));
        }
        f.push(self.cluster.hot_fraction());
        f.push((1.0 - self.cluster.reserved() / cap).max(0.0));
        let mut bands = [0.0; USAGE_BANDS];
        let mut weighted_mean = 0.0;
        for u in &candidates {
            let r = self.data.traces[*u].requested as f64;
            bands[Self::band(self.user_mean[*u])] += r;
            weighted_mean += r * self.user_mean[*u];
        }
        if cores > 0.0 {
            bands.iter_mut().for_each(|b| *b /= cores);
            weighted_mean /= cores;
        }
        f.extend(bands);
        f.push(weighted_mean);
        f.push(self.cluster.step as f64 / self.cfg.horizon as f64);
        f
    }

    fn dot_h(&self, s: &[f64]) -> f64 {
        self.h.iter().zip(s).map(|(a, b)| a * b).sum()
    }

    fn warm_start(&mut self, rng: &mut ChaCha8Rng) {
        let target = self.cfg.warm_fill * self.cfg.total_capacity();
        let n = self.data.len();
        loop {
            let user = rng.random_range(0..n);
            let requested = self.data.traces[user].requested;
            if self.cluster.reserved() + requested as f64 > target + FIT_EPS {
                break;
            }
            let end = rng.random_range(1..=self.cfg.vm_lifetime);
            if !self.cluster.place(
                self.allocator.as_ref(),
                user,
                requested,
                requested as f64,
                end,
            ) {
                break;
            }
        }
        let data = &self.data;
        self.cluster
            .refresh_usage(|vm| data.traces[vm.user].samples[0], self.cfg.hot_threshold);
    }

    fn usage_at(&self, step: usize) -> impl Fn(&Vm) -> f64 + '_ {
        move |vm: &Vm| self.data.traces[vm.user].samples[step]
    }

    /// Admit and place this step's candidates at `rate` on `cluster`.
    fn admit(&self, cluster: &mut ClusterState, rate: f64) {
        let step = cluster.step;
        let mut candidates = self.candidates();
        cluster.pending.clear();
        // best-fit decreasing; stable sort keeps arrival order among equals
        candidates.sort_by(|a, b| {
            self.data.traces[*b]
                .requested
                .cmp(&self.data.traces[*a].requested)
        });
        for user in candidates {
            let requested = self.data.traces[user].requested;
            let reserved = requested as f64 * rate;
            let end = step + self.cfg.vm_lifetime;
            if !cluster.place(self.allocator.as_ref(), user, requested, reserved, end) {
                cluster.pending.push_back(user);
            }
        }
    }

    fn check_action(&self, action: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&action) {
            return Err(Error::Domain(format!("action {action} outside [0, 1]")));
        }
        Ok(())
    }

    /// Export helper: one row per step.
    pub fn write_episode_csv(rows: &[CloudEpisodeRow], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Episode export row: `step,action,cost,hot_fraction,saved_cores_running`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudEpisodeRow {
    pub step: usize,
    pub action: f64,
    pub cost: f64,
    pub hot_fraction: f64,
    pub saved_cores_running: f64,
}

impl Environment for CloudEnv {
    fn state_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn reset(&mut self, mode: StartMode, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.cluster = ClusterState::new(&self.cfg);
        self.history.clear();

        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);
        let horizon = self.cfg.horizon;
        let n = order.len();
        self.arrivals = vec![Vec::new(); horizon];
        for (k, user) in order.into_iter().enumerate() {
            self.arrivals[k * horizon / n].push(user);
        }

        if mode == StartMode::Warm && self.cfg.warm_fill > 0.0 {
            let mut warm_rng = ChaCha8Rng::seed_from_u64(seed);
            warm_rng.set_stream(1);
            self.warm_start(&mut warm_rng);
        }
        self.features = self.build_features();
        self.cost = self.dot_h(&self.features);
        Ok(self.features.clone())
    }

    fn step(&mut self, action: f64) -> Result<Transition> {
        self.check_action(action)?;
        if self.is_done() {
            return Err(Error::EpisodeDone);
        }
        let step = self.cluster.step;
        let rate = self.cfg.effective_rate(action);

        let mut cluster = self.cluster.clone();
        cluster.depart(step);
        self.admit(&mut cluster, rate);
        cluster.refresh_usage(self.usage_at(step), self.cfg.hot_threshold);
        cluster.step += 1;
        self.cluster = cluster;

        let used: f64 = self.cluster.pms.iter().map(|p| p.instantaneous_usage).sum();
        self.history.push_front(used / self.cfg.total_capacity());
        self.history.truncate(self.cfg.history_window);

        self.features = self.build_features();
        self.cost = self.dot_h(&self.features);
        let info = CloudStepInfo {
            hot_fraction: self.cluster.hot_fraction(),
            reserved: self.cluster.reserved(),
            promised: self.cluster.promised(),
            pm_hot: self.cluster.pms.iter().map(|p| p.hot).collect(),
            pending: self.cluster.pending.len(),
        };
        Ok(Transition {
            state: self.features.clone(),
            cost: self.cost,
            done: self.is_done(),
            info: StepInfo::Cloud(info),
        })
    }

    fn state(&self) -> &[f64] {
        &self.features
    }

    fn cost(&self) -> f64 {
        self.cost
    }

    /// Core-weighted usage rate of this step's arrivals; falls back to the
    /// running VMs, then to the population mean.
    fn expert_action(&self) -> f64 {
        let step = self.cluster.step.min(self.cfg.horizon - 1);
        let weighted = |users: &mut dyn Iterator<Item = (usize, u32)>| {
            let (mut num, mut den) = (0.0, 0.0);
            for (u, r) in users {
                num += self.data.traces[u].samples[step] * r as f64;
                den += r as f64;
            }
            (den > 0.0).then(|| num / den)
        };
        let arrivals = self.arrivals.get(step).map(Vec::as_slice).unwrap_or(&[]);
        if let Some(a) = weighted(
            &mut arrivals
                .iter()
                .map(|u| (*u, self.data.traces[*u].requested)),
        ) {
            return a;
        }
        if let Some(a) = weighted(&mut self.cluster.vms.iter().map(|v| (v.user, v.requested))) {
            return a;
        }
        self.data
            .traces
            .iter()
            .map(|t| t.samples[step])
            .sum::<f64>()
            / self.data.len() as f64
    }

    fn safest_action(&self) -> f64 {
        1.0
    }

    /// Next-state cost with every VM at its historical peak usage.
    fn worst_case_cost(&self, action: f64) -> Result<f64> {
        self.check_action(action)?;
        if self.is_done() {
            return Err(Error::EpisodeDone);
        }
        let mut cluster = self.cluster.clone();
        cluster.depart(cluster.step);
        self.admit(&mut cluster, self.cfg.effective_rate(action));
        cluster.refresh_usage(|vm| self.user_max[vm.user], self.cfg.hot_threshold);
        let mut f = self.features.clone();
        f[self.cfg.hot_feature()] = cluster.hot_fraction();
        f[self.cfg.hot_feature() + 1] =
            (1.0 - cluster.reserved() / self.cfg.total_capacity()).max(0.0);
        Ok(self.dot_h(&f))
    }

    fn is_done(&self) -> bool {
        self.cluster.step >= self.cfg.horizon
    }
}

/// Percentage of promised cores not physically reserved, averaged over the
/// steps on which anything was promised.
pub fn saved_cores(steps: &[CloudStepInfo]) -> Result<f64> {
    let ratios: Vec<f64> = steps
        .iter()
        .filter(|s| s.promised > 0.0)
        .map(|s| s.reserved / s.promised)
        .collect();
    if ratios.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(100.0 * (1.0 - ratios.iter().sum::<f64>() / ratios.len() as f64))
}

/// Largest per-PM fraction of hot steps, in percent, averaged over episodes.
pub fn pm_hot_ratio(episodes: &[Vec<CloudStepInfo>]) -> Result<f64> {
    if episodes.is_empty() || episodes.iter().any(Vec::is_empty) {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for ep in episodes {
        let n_pms = ep[0].pm_hot.len();
        let mut counts = vec![0usize; n_pms];
        for s in ep {
            if s.pm_hot.len() != n_pms {
                return Err(Error::Shape("PM count changed within an episode".into()));
            }
            for (c, hot) in counts.iter_mut().zip(&s.pm_hot) {
                *c += *hot as usize;
            }
        }
        let worst = counts.into_iter().max().unwrap_or(0);
        total += 100.0 * worst as f64 / ep.len() as f64;
    }
    Ok(total / episodes.len() as f64)
}
