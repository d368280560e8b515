//! Common interface for the oversubscription environments.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How an episode begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMode {
    /// Empty system.
    #[default]
    Cold,
    /// System pre-loaded with running allocations.
    Warm,
}

impl std::str::FromStr for StartMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cold" => Ok(Self::Cold),
            "warm" => Ok(Self::Warm),
            _ => Err(crate::error::Error::Config(format!(
                "unknown start mode {s}"
            ))),
        }
    }
}

/// Per-transition bookkeeping, specific to each environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepInfo {
    Cloud(CloudStepInfo),
    Airline(AirlineStepInfo),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudStepInfo {
    pub hot_fraction: f64,
    /// Physical cores reserved by running VMs.
    pub reserved: f64,
    /// Cores promised to running VMs.
    pub promised: f64,
    pub pm_hot: Vec<bool>,
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AirlineStepInfo {
    pub capacity: u32,
    pub demand: u32,
    pub sold: u32,
    pub shows: u32,
    pub onboard: u32,
    pub offloaded: u32,
    pub no_shows: u32,
    pub no_show_rate: f64,
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// `c(s_{t+1}) = h . s_{t+1}`
    pub cost: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Gym-style episodic environment with actions in `[0, 1]`.
pub trait Environment {
    fn state_dim(&self) -> usize;

    fn horizon(&self) -> usize;

    fn reset(&mut self, mode: StartMode, seed: u64) -> Result<Vec<f64>>;

    fn step(&mut self, action: f64) -> Result<Transition>;

    /// Current feature vector `s_t`.
    fn state(&self) -> &[f64];

    /// `c(s_t)` for the current state.
    fn cost(&self) -> f64;

    /// Surrogate expert label at the current state.
    fn expert_action(&self) -> f64;

    /// Action with the least congestion risk.
    fn safest_action(&self) -> f64;

    /// Cost of the next transition if every stochastic quantity took its
    /// worst historical value, for a candidate action.
    fn worst_case_cost(&self, action: f64) -> Result<f64>;

    fn is_done(&self) -> bool;
}

/// Step used when scanning actions for the worst-case clip.
pub const CLIP_GRID: f64 = 0.01;

/// Smallest move from `action` toward the safest action such that the
/// worst-case next cost stays within `g`. Actions already within budget are
/// returned unchanged; if no grid point qualifies the safest action is used.
pub fn worst_case_clip<E: Environment + ?Sized>(env: &E, action: f64, g: f64) -> Result<f64> {
    if env.worst_case_cost(action)? <= g {
        return Ok(action);
    }
    let safest = env.safest_action();
    let steps = (1.0 / CLIP_GRID).round() as i64;
    let idx = (action / CLIP_GRID).round() as i64;
    let range: Box<dyn Iterator<Item = i64>> = if safest > action {
        Box::new(idx..=steps)
    } else {
        Box::new((0..=idx).rev())
    };
    for i in range {
        let candidate = (i as f64 * CLIP_GRID).clamp(0.0, 1.0);
        if (safest > action && candidate <= action) || (safest < action && candidate >= action) {
            continue;
        }
        if env.worst_case_cost(candidate)? <= g {
            return Ok(candidate);
        }
    }
    Ok(safest)
}
