//! Quarterly airline overbooking environment.
//!
//! Demand follows a sinusoidal season with multiplicative Gaussian noise.
//! The action is the overbooking rate: up to `capacity * (1 + a)` tickets
//! are sold, each passenger shows up independently with probability
//! `1 - no_show_rate`, and passengers beyond capacity are offloaded. The
//! no-show rate decays geometrically per year down to a floor.
//!
//! Feature layout of `s_t` (`W` = `history_window`):
//!
//! | index | feature |
//! |---|---|
//! | 0 | elapsed fraction of the episode |
//! | 1 | season factor minus one |
//! | 2 | no-show rate of the next quarter |
//! | 3 | expected demand of the next quarter / capacity |
//! | 4..4+W | past overbooking rates, most recent first |
//! | 4+W..4+2W | past offload ratios, most recent first |
//!
//! The default cost selects the most recent offload ratio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{AirlineStepInfo, Environment, StartMode, StepInfo, Transition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AirlineConfig {
    pub capacity: u32,
    pub quarters: usize,
    pub base_demand: f64,
    pub peak_amplitude: f64,
    pub initial_no_show: f64,
    /// Per-year multiplicative no-show decay.
    pub no_show_decay: f64,
    pub no_show_floor: f64,
    pub fare: f64,
    pub bump_penalty: f64,
    /// Relative standard deviation of realised demand.
    pub demand_noise: f64,
    /// Standard deviation of the expert label around the break-even rate.
    pub expert_noise: f64,
    pub history_window: usize,
    pub seed: u64,
    pub cost_vector: Option<Vec<f64>>,
}

impl Default for AirlineConfig {
    fn default() -> Self {
        Self {
            capacity: 100,
            quarters: 40,
            base_demand: 110.0,
            peak_amplitude: 0.3,
            initial_no_show: 0.15,
            no_show_decay: 0.9,
            no_show_floor: 0.02,
            fare: 1.0,
            bump_penalty: 4.0,
            demand_noise: 0.1,
            expert_noise: 0.02,
            history_window: 4,
            seed: 0,
            cost_vector: None,
        }
    }
}

impl AirlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::Config("capacity must be positive".into()));
        }
        if self.quarters == 0 {
            return Err(Error::Config("quarters must be positive".into()));
        }
        if !(self.base_demand >= 0.0 && self.base_demand.is_finite()) {
            return Err(Error::Config(
                "base_demand must be finite and nonnegative".into(),
            ));
        }
        if !(self.peak_amplitude >= 0.0) {
            return Err(Error::Config("peak_amplitude must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.initial_no_show) || !(0.0..1.0).contains(&self.no_show_floor)
        {
            return Err(Error::Config("no-show rates must lie in [0, 1)".into()));
        }
        if !(self.no_show_decay > 0.0 && self.no_show_decay <= 1.0) {
            return Err(Error::Config("no_show_decay must lie in (0, 1]".into()));
        }
        if !(self.fare > 0.0) || !(self.bump_penalty >= 0.0) {
            return Err(Error::Config(
                "fare must be positive and bump_penalty nonnegative".into(),
            ));
        }
        if !(self.demand_noise >= 0.0) || !(self.expert_noise >= 0.0) {
            return Err(Error::Config("noise levels must be nonnegative".into()));
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
        4 + 2 * self.history_window
    }

    /// Index of the latest offload ratio; `None` when the history is empty.
    pub fn offload_feature(&self) -> Option<usize> {
        (self.history_window > 0).then_some(4 + self.history_window)
    }

    pub fn cost_vector(&self) -> Vec<f64> {
        self.cost_vector.clone().unwrap_or_else(|| {
            let mut h = vec![0.0; self.feature_dim()];
            if let Some(i) = self.offload_feature() {
                h[i] = 1.0;
            }
            h
        })
    }

    /// Peak multiplier of quarter `q`, at least one.
    pub fn season_factor(&self, q: usize) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * (q % 4) as f64 / 4.0;
        1.0 + self.peak_amplitude * (1.0 + phase.sin()) / 2.0
    }

    /// No-show rate in quarter `q`; year index is `q / 4`.
    pub fn no_show_rate(&self, q: usize) -> f64 {
        (self.initial_no_show * self.no_show_decay.powi((q / 4) as i32)).max(self.no_show_floor)
    }

    pub fn expected_demand(&self, q: usize) -> f64 {
        self.base_demand * self.season_factor(q)
    }
}

/// Ticket sales and show-ups for one quarter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookingOutcome {
    pub sold: u32,
    pub shows: u32,
    pub onboard: u32,
    pub offloaded: u32,
    pub no_shows: u32,
}

impl BookingOutcome {
    pub fn new(capacity: u32, sold: u32, shows: u32) -> Self {
        debug_assert!(shows <= sold);
        Self {
            sold,
            shows,
            onboard: shows.min(capacity),
            offloaded: shows.saturating_sub(capacity),
            no_shows: sold - shows,
        }
    }

    /// Offloaded passengers per boarded passenger.
    pub fn offload_ratio(&self) -> f64 {
        self.offloaded as f64 / self.onboard.max(1) as f64
    }
}

/// Tickets sold at overbooking rate `a`.
pub fn tickets_sold(capacity: u32, demand: u32, a: f64) -> u32 {
    demand.min((capacity as f64 * (1.0 + a)).round() as u32)
}

/// The airline overbooking environment.
pub struct AirlineEnv {
    cfg: AirlineConfig,
    h: Vec<f64>,
    quarter: usize,
    demand: Vec<u32>,
    expert: Vec<f64>,
    rng: ChaCha8Rng,
    rates: Vec<f64>,
    offloads: Vec<f64>,
    features: Vec<f64>,
    cost: f64,
}

impl AirlineEnv {
    pub fn new(cfg: AirlineConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let mut env = Self {
            h: cfg.cost_vector(),
            cfg,
            quarter: 0,
            demand: Vec::new(),
            expert: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            rates: Vec::new(),
            offloads: Vec::new(),
            features: Vec::new(),
            cost: 0.0,
        };
        env.reset(StartMode::Cold, seed)?;
        Ok(env)
    }

    pub fn config(&self) -> &AirlineConfig {
        &self.cfg
    }

    pub fn quarter(&self) -> usize {
        self.quarter
    }

    /// Realised demand of every quarter in the current episode.
    pub fn demand(&self) -> &[u32] {
        &self.demand
    }

    fn build_features(&self) -> Vec<f64> {
        let q = self.quarter.min(self.cfg.quarters - 1);
        let w = self.cfg.history_window;
        let mut f = Vec::with_capacity(self.cfg.feature_dim());
        f.push(self.quarter as f64 / self.cfg.quarters as f64);
        f.push(self.cfg.season_factor(q) - 1.0);
        f.push(self.cfg.no_show_rate(q));
        f.push(self.cfg.expected_demand(q) / self.cfg.capacity as f64);
        for hist in [&self.rates, &self.offloads] {
            f.extend((0..w).map(|k| hist.len().checked_sub(k + 1).map_or(0.0, |i| hist[i])));
        }
        f
    }

    fn dot_h(&self, s: &[f64]) -> f64 {
        self.h.iter().zip(s).map(|(a, b)| a * b).sum()
    }

    fn check_action(&self, action: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&action) {
            return Err(Error::Domain(format!(
                "overbooking rate {action} outside [0, 1]"
            )));
        }
        if self.is_done() {
            return Err(Error::EpisodeDone);
        }
        Ok(())
    }

    /// Next-state cost for a given booking outcome.
    fn cost_after(&self, action: f64, outcome: &BookingOutcome) -> f64 {
        let w = self.cfg.history_window;
        let mut f = self.features.clone();
        f[0] = (self.quarter + 1) as f64 / self.cfg.quarters as f64;
        if w > 0 {
            f.copy_within(4..3 + w, 5);
            f[4] = action;
            f.copy_within(4 + w..3 + 2 * w, 5 + w);
            f[4 + w] = outcome.offload_ratio();
        }
        self.dot_h(&f)
    }
}

impl Environment for AirlineEnv {
    fn state_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    fn horizon(&self) -> usize {
        self.cfg.quarters
    }

    /// Warm and cold starts coincide: no booking carries over between quarters.
    fn reset(&mut self, _mode: StartMode, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.demand = (0..self.cfg.quarters)
            .map(|q| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (self.cfg.expected_demand(q) * (1.0 + self.cfg.demand_noise * z))
                    .round()
                    .max(0.0) as u32
            })
            .collect();
        self.expert = (0..self.cfg.quarters)
            .map(|q| {
                let p = self.cfg.no_show_rate(q);
                let z: f64 = StandardNormal.sample(&mut rng);
                (p / (1.0 - p) + self.cfg.expert_noise * z).clamp(0.0, 1.0)
            })
            .collect();
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_stream(1);
        self.quarter = 0;
        self.rates.clear();
        self.offloads.clear();
        self.features = self.build_features();
        self.cost = self.dot_h(&self.features);
        Ok(self.features.clone())
    }

    fn step(&mut self, action: f64) -> Result<Transition> {
        self.check_action(action)?;
        let q = self.quarter;
        let cap = self.cfg.capacity;
        let sold = tickets_sold(cap, self.demand[q], action);
        let p = self.cfg.no_show_rate(q);
        let shows = if p == 0.0 {
            sold
        } else {
            Binomial::new(sold as u64, 1.0 - p)
                .map_err(|e| Error::Value(e.to_string()))?
                .sample(&mut self.rng) as u32
        };
        let outcome = BookingOutcome::new(cap, sold, shows);
        self.rates.push(action);
        self.offloads.push(outcome.offload_ratio());
        self.quarter += 1;
        self.features = self.build_features();
        self.cost = self.dot_h(&self.features);
        let info = AirlineStepInfo {
            capacity: cap,
            demand: self.demand[q],
            sold: outcome.sold,
            shows: outcome.shows,
            onboard: outcome.onboard,
            offloaded: outcome.offloaded,
            no_shows: outcome.no_shows,
            no_show_rate: p,
        };
        Ok(Transition {
            state: self.features.clone(),
            cost: self.cost,
            done: self.is_done(),
            info: StepInfo::Airline(info),
        })
    }

    fn state(&self) -> &[f64] {
        &self.features
    }

    fn cost(&self) -> f64 {
        self.cost
    }

    /// Break-even overbooking rate `p / (1 - p)` plus label noise.
    fn expert_action(&self) -> f64 {
        self.expert[self.quarter.min(self.cfg.quarters - 1)]
    }

    fn safest_action(&self) -> f64 {
        0.0
    }

    /// Cost if every ticket holder shows up.
    fn worst_case_cost(&self, action: f64) -> Result<f64> {
        self.check_action(action)?;
        let cap = self.cfg.capacity;
        let sold = tickets_sold(cap, self.demand[self.quarter], action);
        Ok(self.cost_after(action, &BookingOutcome::new(cap, sold, sold)))
    }

    fn is_done(&self) -> bool {
        self.quarter >= self.cfg.quarters
    }
}

/// Normalised profit of one episode, 100 for a full flight without offloads.
pub fn profit(cfg: &AirlineConfig, steps: &[AirlineStepInfo]) -> Result<f64> {
    cfg.validate()?;
    if steps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let earned: f64 = steps
        .iter()
        .map(|s| cfg.fare * s.onboard as f64 - cfg.bump_penalty * s.offloaded as f64)
        .sum();
    Ok(100.0 * earned / (cfg.fare * cfg.capacity as f64 * steps.len() as f64))
}

/// 100 times the mean over all quarters of offloaded / onboard.
pub fn ticket_cost_ratio(episodes: &[Vec<AirlineStepInfo>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in episodes.iter().flatten() {
        if s.capacity == 0 {
            return Err(Error::Config("capacity must be positive".into()));
        }
        sum += s.offloaded as f64 / s.onboard.max(1) as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(100.0 * sum / n as f64)
}
