//! Chance-constraint machinery.
//!
//! A trajectory-level chance constraint `Pr(mean cost <= g) >= 1 - delta` is
//! replaced by the deterministic constraint
//!
//! ```text
//! b(s) = Vb(s) + Vf(s) - c(s) <= g - m(delta),   m(delta) = -sigma * inv_phi(delta)
//! ```
//!
//! where `Vb` is the backward value (expected cost accumulated so far), `Vf`
//! the forward value (expected cost to go) and `sigma` the spread of `b`
//! across an ensemble of value heads. When a proposed action violates the
//! linearised constraint on the action-value head `Q`, [`project`] moves it to
//! the nearest feasible action in closed form.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, OutputKind};

/// Standard normal quantile, Wichura's AS241 (PPND16).
///
/// Relative accuracy is about 1e-16 over the open unit interval.
#[allow(clippy::excessive_precision)]
pub fn norm_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile undefined at p = {p}")));
    }
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        133.141_667_891_784_377_45,
        1_971.590_950_306_551_442_7,
        13_731.693_765_509_461_125,
        45_921.953_931_549_871_457,
        67_265.770_927_008_700_853,
        33_430.575_583_588_128_105,
        2_509.080_928_730_122_672_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_911_252,
        687.187_007_492_057_908_3,
        5_394.196_021_424_751_107_7,
        21_213.794_301_586_595_867,
        39_307.895_800_092_710_61,
        28_729.085_735_721_942_674,
        5_226.495_278_852_854_561,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        0.241_780_725_177_450_611_77,
        0.022_723_844_989_269_184_583_3,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        0.689_767_334_985_100_004_55,
        0.148_103_976_427_480_074_59,
        0.015_198_666_563_616_457_196_6,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        0.296_560_571_828_504_891_23,
        0.026_532_189_526_576_123_093,
        0.001_242_660_947_388_078_438_6,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_937_69,
        0.136_929_880_922_735_805_31,
        0.014_875_361_290_850_614_852_5,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];
    fn poly(c: &[f64; 8], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, k| acc * x + k)
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return Ok(q * poly(&A, r) / poly(&B, r));
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    Ok(if q < 0.0 { -val } else { val })
}

/// Gaussian tightening `m(delta) = -sigma * inv_phi(delta)`.
///
/// Positive for `delta < 0.5`, zero at the median, linear in `sigma`.
pub fn m_delta(sigma: f64, delta: f64) -> Result<f64> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if delta == 0.5 {
        return Ok(0.0);
    }
    Ok(-sigma * norm_quantile(delta)?)
}

/// Sample standard deviation (`n - 1` denominator) of per-member constraint values.
pub fn ensemble_sigma(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Domain(format!(
            "ensemble spread needs at least 2 members, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

/// How the trajectory budget `(g, delta)` is split into per-step budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSplit {
    /// `g_t = g`, `delta_t = delta`.
    #[default]
    Uniform,
    /// `g_t = g`, `delta_t = delta / T`.
    Bonferroni,
}

/// Chance-constraint parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChanceConfig {
    /// Budget on the trajectory-mean cost.
    pub g: f64,
    /// Allowed violation probability.
    pub delta: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub ensemble_size: usize,
    pub split: BudgetSplit,
}

impl Default for ChanceConfig {
    fn default() -> Self {
        Self {
            g: 0.85,
            delta: 0.05,
            horizon: 100,
            gamma: 0.99,
            ensemble_size: 5,
            split: BudgetSplit::Uniform,
        }
    }
}

impl ChanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.g) {
            return Err(Error::Config(format!(
                "g must lie in [0, 1], got {}",
                self.g
            )));
        }
        if !(self.delta > 0.0 && self.delta <= 0.5) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 0.5], got {}",
                self.delta
            )));
        }
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.ensemble_size < 2 {
            return Err(Error::Config("ensemble size must be >= 2".into()));
        }
        Ok(())
    }

    /// Per-step `(g_t, delta_t)`.
    pub fn step_budget(&self) -> (f64, f64) {
        match self.split {
            BudgetSplit::Uniform => (self.g, self.delta),
            BudgetSplit::Bonferroni => (self.g, self.delta / self.horizon as f64),
        }
    }
}

/// Result of checking the state-level constraint at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEvaluation {
    pub backward_value: f64,
    pub forward_value: f64,
    pub instantaneous_cost: f64,
    /// `backward_value + forward_value - instantaneous_cost`
    pub b: f64,
    pub sigma: f64,
    pub m_delta: f64,
    /// `g_t - m_delta`
    pub threshold: f64,
    pub feasible: bool,
}

impl ConstraintEvaluation {
    /// Assemble an evaluation from per-member backward and forward values.
    pub fn from_members(
        backward: &[f64],
        forward: &[f64],
        cost: f64,
        g: f64,
        delta: f64,
    ) -> Result<Self> {
        if backward.len() != forward.len() {
            return Err(Error::Shape(format!(
                "{} backward members vs {} forward members",
                backward.len(),
                forward.len()
            )));
        }
        let n = backward.len() as f64;
        let b_members: Vec<f64> = backward
            .iter()
            .zip(forward)
            .map(|(vb, vf)| vb + vf - cost)
            .collect();
        let sigma = ensemble_sigma(&b_members)?;
        let m = m_delta(sigma, delta)?;
        let backward_value = backward.iter().sum::<f64>() / n;
        let forward_value = forward.iter().sum::<f64>() / n;
        let b = backward_value + forward_value - cost;
        let threshold = g - m;
        Ok(Self {
            backward_value,
            forward_value,
            instantaneous_cost: cost,
            b,
            sigma,
            m_delta: m,
            threshold,
            feasible: b <= threshold,
        })
    }
}

/// Outcome of the safety-layer projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub action: f64,
    pub lambda: f64,
    /// The constraint was violated but the action gradient vanished, so the
    /// fallback action was returned.
    pub degenerate: bool,
}

/// Squared gradient norm below which the linearisation is treated as flat.
pub const DEGENERATE_GRADIENT: f64 = 1e-12;

/// Closed-form projection onto `Q(s, a_raw) + d * (a - a_raw) <= g + c - Vb`.
///
/// `lambda = max(0, -(g + c - Vb - Q) / d^2)`, `a* = clamp(a_raw - lambda * d, 0, 1)`.
pub fn project(
    a_raw: f64,
    g: f64,
    cost: f64,
    backward_value: f64,
    q: f64,
    d: f64,
    fallback: f64,
) -> Projection {
    let numerator = -(g + cost - backward_value - q);
    if numerator <= 0.0 {
        return Projection {
            action: a_raw,
            lambda: 0.0,
            degenerate: false,
        };
    }
    let dd = d * d;
    if dd < DEGENERATE_GRADIENT {
        warn!("safety layer: flat action gradient under violation (excess {numerator:.3e}), falling back to {fallback}");
        return Projection {
            action: fallback,
            lambda: 0.0,
            degenerate: true,
        };
    }
    let lambda = numerator / dd;
    Projection {
        action: (a_raw - lambda * d).clamp(0.0, 1.0),
        lambda,
        degenerate: false,
    }
}

/// Ensemble of backward and forward value heads plus one action-value head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEnsemble {
    pub backward: Vec<Mlp>,
    pub forward: Vec<Mlp>,
    /// Input is the state followed by the action.
    pub action_value: Mlp,
    pub sync_interval: usize,
    pub sync_rate: f64,
    pub gamma: f64,
}

fn head_sizes(input: usize, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    sizes
}

impl ValueEnsemble {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: &[usize],
        members: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if members < 2 {
            return Err(Error::Config("ensemble needs at least 2 members".into()));
        }
        let vs = head_sizes(state_dim, hidden);
        let backward = (0..members)
            .map(|_| Mlp::new(&vs, OutputKind::Identity, rng))
            .collect::<Result<Vec<_>>>()?;
        let forward = (0..members)
            .map(|_| Mlp::new(&vs, OutputKind::Identity, rng))
            .collect::<Result<Vec<_>>>()?;
        let action_value = Mlp::new(
            &head_sizes(state_dim + 1, hidden),
            OutputKind::Identity,
            rng,
        )?;
        Ok(Self {
            backward,
            forward,
            action_value,
            sync_interval: 10,
            sync_rate: 0.5,
            gamma,
        })
    }

    /// All heads output exactly zero.
    pub fn zeros(state_dim: usize, hidden: &[usize], members: usize, gamma: f64) -> Result<Self> {
        if members < 2 {
            return Err(Error::Config("ensemble needs at least 2 members".into()));
        }
        let vs = head_sizes(state_dim, hidden);
        let zero = Mlp::zeros(&vs, OutputKind::Identity)?;
        Ok(Self {
            backward: vec![zero.clone(); members],
            forward: vec![zero; members],
            action_value: Mlp::zeros(&head_sizes(state_dim + 1, hidden), OutputKind::Identity)?,
            sync_interval: 10,
            sync_rate: 0.5,
            gamma,
        })
    }

    pub fn members(&self) -> usize {
        self.backward.len()
    }

    pub fn state_dim(&self) -> usize {
        self.action_value.input_dim() - 1
    }

    pub fn backward_values(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.backward.iter().map(|m| m.forward(s)).collect()
    }

    pub fn forward_values(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.forward.iter().map(|m| m.forward(s)).collect()
    }

    pub fn mean_backward(&self, s: &[f64]) -> Result<f64> {
        Ok(mean(&self.backward_values(s)?))
    }

    fn action_input(s: &[f64], a: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(s.len() + 1);
        x.extend_from_slice(s);
        x.push(a);
        x
    }

    pub fn q_value(&self, s: &[f64], a: f64) -> Result<f64> {
        self.action_value.forward(&Self::action_input(s, a))
    }

    /// `(Q(s, a), dQ/da)`.
    pub fn q_and_action_gradient(&self, s: &[f64], a: f64) -> Result<(f64, f64)> {
        let acts = self
            .action_value
            .forward_cached(&Self::action_input(s, a))?;
        let grad = self.action_value.input_gradient(&acts, 1.0)?;
        Ok((acts.output(), *grad.last().unwrap()))
    }

    pub fn evaluate(
        &self,
        s: &[f64],
        cost: f64,
        g: f64,
        delta: f64,
    ) -> Result<ConstraintEvaluation> {
        ConstraintEvaluation::from_members(
            &self.backward_values(s)?,
            &self.forward_values(s)?,
            cost,
            g,
            delta,
        )
    }

    /// Moves every member toward its group mean by `sync_rate`.
    pub fn sync(&mut self) -> Result<()> {
        sync_members(&mut self.backward, self.sync_rate)?;
        sync_members(&mut self.forward, self.sync_rate)
    }

    pub fn is_finite(&self) -> bool {
        self.backward
            .iter()
            .chain(&self.forward)
            .chain(std::iter::once(&self.action_value))
            .all(|m| m.parameters().iter().all(|p| p.is_finite()))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Check the state-level constraint at `s` with per-step budget `(g, delta)`.
pub fn evaluate_constraint(
    ensemble: &ValueEnsemble,
    s: &[f64],
    cost: f64,
    g: f64,
    delta: f64,
) -> Result<ConstraintEvaluation> {
    ensemble.evaluate(s, cost, g, delta)
}

/// Safety layer: `d = dQ/da` at `a_raw`, then [`project`].
pub fn project_action(
    a_raw: f64,
    s: &[f64],
    ensemble: &ValueEnsemble,
    g: f64,
    cost: f64,
    fallback: f64,
) -> Result<Projection> {
    if !(0.0..=1.0).contains(&a_raw) {
        return Err(Error::Domain(format!("raw action {a_raw} outside [0, 1]")));
    }
    let vb = ensemble.mean_backward(s)?;
    let (q, d) = ensemble.q_and_action_gradient(s, a_raw)?;
    Ok(project(a_raw, g, cost, vb, q, d, fallback))
}

/// One squared-error step of `member(s)` toward `target`. Returns the
/// pre-update error `member(s) - target`.
pub fn regress(member: &mut Mlp, s: &[f64], target: f64, lr: f64) -> Result<f64> {
    let acts = member.forward_cached(s)?;
    let err = acts.output() - target;
    let tape = member.backward(&acts, 2.0 * err)?;
    member.sgd_step(&tape, lr)?;
    Ok(err)
}

/// Backward TD step toward `c_t + gamma * Vb(s_{t-1})`; pass `prev_value = 0`
/// at the first step of an episode.
pub fn td_update_backward(
    member: &mut Mlp,
    s_t: &[f64],
    cost: f64,
    prev_value: f64,
    gamma: f64,
    lr: f64,
) -> Result<f64> {
    regress(member, s_t, cost + gamma * prev_value, lr)
}

/// Forward TD step toward `c_t + gamma * Vf(s_{t+1})`; pass `next_value = 0`
/// past the horizon.
pub fn td_update_forward(
    member: &mut Mlp,
    s_t: &[f64],
    cost: f64,
    next_value: f64,
    gamma: f64,
    lr: f64,
) -> Result<f64> {
    regress(member, s_t, cost + gamma * next_value, lr)
}

/// `theta_n <- theta_n + rho * (mean - theta_n)` for every member.
pub fn sync_members(members: &mut [Mlp], rho: f64) -> Result<()> {
    if members.is_empty() {
        return Ok(());
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!(
            "sync rate must lie in [0, 1], got {rho}"
        )));
    }
    let params: Vec<Vec<f64>> = members.iter().map(|m| m.parameters()).collect();
    let len = params[0].len();
    if params.iter().any(|p| p.len() != len) {
        return Err(Error::Shape(
            "ensemble members differ in architecture".into(),
        ));
    }
    let n = params.len() as f64;
    let centre: Vec<f64> = (0..len)
        .map(|i| params.iter().map(|p| p[i]).sum::<f64>() / n)
        .collect();
    for (m, p) in members.iter_mut().zip(&params) {
        let moved: Vec<f64> = p
            .iter()
            .zip(&centre)
            .map(|(x, c)| x + rho * (c - x))
            .collect();
        m.set_parameters(&moved)?;
    }
    Ok(())
}

/// Sum of pairwise Euclidean distances between member parameter vectors.
pub fn member_diversity(members: &[Mlp]) -> f64 {
    let params: Vec<Vec<f64>> = members.iter().map(|m| m.parameters()).collect();
    let mut total = 0.0;
    for i in 0..params.len() {
        for j in i + 1..params.len() {
            total += params[i]
                .iter()
                .zip(&params[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn median_tightening_is_zero() {
        assert_eq!(m_delta(1.0, 0.5).unwrap(), 0.0);
        assert_eq!(m_delta(7.3, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn tightening_at_five_percent() {
        assert!((m_delta(1.0, 0.05).unwrap() - 1.6449).abs() < 1e-3);
        assert!((m_delta(2.0, 0.05).unwrap() - 3.2897).abs() < 2e-3);
    }

    #[test]
    fn quantile_rejects_endpoints() {
        assert!(matches!(m_delta(1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(m_delta(1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(m_delta(-1.0, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn quantile_tails_are_symmetric() {
        for p in [1e-300, 1e-20, 1e-5, 0.01, 0.2, 0.45] {
            let lo = norm_quantile(p).unwrap();
            // 1 - p rounds to 1 for tiny p
            if p > 1e-15 {
                let hi = norm_quantile(1.0 - p).unwrap();
                assert!((lo + hi).abs() < 1e-9 * lo.abs().max(1.0), "p={p}");
            }
            assert!(lo < 0.0);
        }
    }

    #[test]
    fn sigma_hand_cases() {
        assert_eq!(ensemble_sigma(&[0.3, 0.3, 0.3]).unwrap(), 0.0);
        assert!((ensemble_sigma(&[0.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-9);
        assert!((ensemble_sigma(&[1.0, 2.0, 3.0, 4.0]).unwrap() - 1.2910).abs() < 1e-4);
        assert!(ensemble_sigma(&[1.0]).is_err());
    }

    #[test]
    fn zero_ensemble_is_feasible() {
        let ens = ValueEnsemble::zeros(4, &[8], 3, 0.99).unwrap();
        let ev = evaluate_constraint(&ens, &[0.1, 0.2, 0.3, 0.4], 0.0, 0.5, 0.5).unwrap();
        assert_eq!(ev.b, 0.0);
        assert_eq!(ev.sigma, 0.0);
        assert!(ev.feasible);
    }

    #[test]
    fn hand_set_members_infeasible() {
        // members b = {0.8, 0.9, 1.0}: mean 0.9, sigma 0.1
        let ev =
            ConstraintEvaluation::from_members(&[0.5, 0.6, 0.7], &[0.4, 0.4, 0.4], 0.1, 0.85, 0.05)
                .unwrap();
        assert!((ev.b - 0.9).abs() < 1e-12);
        assert!((ev.sigma - 0.1).abs() < 1e-12);
        assert!((ev.threshold - 0.6855).abs() < 1e-4);
        assert!(!ev.feasible);
    }

    #[test]
    fn median_delta_threshold_equals_budget() {
        let ev =
            ConstraintEvaluation::from_members(&[0.1, 0.9], &[0.0, 0.3], 0.0, 0.6, 0.5).unwrap();
        assert_eq!(ev.threshold, 0.6);
    }

    #[test]
    fn projection_hand_cases() {
        let p = project(0.4, 1.0, 0.2, 0.5, 0.6, 3.0, 1.0);
        assert_eq!(
            p,
            Projection {
                action: 0.4,
                lambda: 0.0,
                degenerate: false
            }
        );

        let p = project(0.7, 1.0, 0.2, 0.5, 0.9, 2.0, 1.0);
        assert!((p.lambda - 0.05).abs() < 1e-12);
        assert!((p.action - 0.6).abs() < 1e-12);

        let p = project(0.7, 1.0, 0.2, 0.5, 0.9, 0.0, 0.1);
        assert!(p.degenerate);
        assert_eq!(p.action, 0.1);
    }

    #[test]
    fn backward_td_converges_to_constant_cost() {
        let mut net = Mlp::zeros(&[1, 1], OutputKind::Identity).unwrap();
        let s = [1.0];
        for _ in 0..2000 {
            td_update_backward(&mut net, &s, 0.37, 0.0, 0.0, 0.05).unwrap();
        }
        assert!((net.forward(&s).unwrap() - 0.37).abs() < 1e-3);
    }

    fn one_hot(i: usize) -> [f64; 3] {
        let mut s = [0.0; 3];
        s[i] = 1.0;
        s
    }

    fn chain_values(forward: bool, costs: [f64; 3]) -> Vec<f64> {
        let mut net = Mlp::zeros(&[3, 1], OutputKind::Identity).unwrap();
        for _ in 0..3000 {
            if forward {
                let mut next = 0.0;
                for t in (0..3).rev() {
                    td_update_forward(&mut net, &one_hot(t), costs[t], next, 1.0, 0.1).unwrap();
                    next = net.forward(&one_hot(t)).unwrap();
                }
            } else {
                let mut prev = 0.0;
                for (t, c) in costs.iter().enumerate() {
                    td_update_backward(&mut net, &one_hot(t), *c, prev, 1.0, 0.1).unwrap();
                    prev = net.forward(&one_hot(t)).unwrap();
                }
            }
        }
        (0..3).map(|t| net.forward(&one_hot(t)).unwrap()).collect()
    }

    #[test]
    fn td_on_deterministic_chain_matches_cumulative_sums() {
        let back = chain_values(false, [0.1, 0.2, 0.3]);
        let fwd = chain_values(true, [0.1, 0.2, 0.3]);
        for (v, want) in back.iter().zip([0.1, 0.3, 0.6]) {
            assert!((v - want).abs() < 1e-2, "{back:?}");
        }
        for (v, want) in fwd.iter().zip([0.6, 0.5, 0.3]) {
            assert!((v - want).abs() < 1e-2, "{fwd:?}");
        }
        for forward in [false, true] {
            let zero = chain_values(forward, [0.0; 3]);
            assert!(zero.iter().all(|v| v.abs() < 1e-12), "{zero:?}");
        }
    }

    #[test]
    fn sync_hand_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Mlp::new(&[2, 3, 1], OutputKind::Identity, &mut rng).unwrap();
        let mut same = vec![base.clone(), base.clone()];
        sync_members(&mut same, 0.5).unwrap();
        assert_eq!(same[0], base);

        let v = base.parameters();
        let mut a = base.clone();
        let mut b = base.clone();
        a.set_parameters(&v).unwrap();
        b.set_parameters(&v.iter().map(|x| -x).collect::<Vec<_>>())
            .unwrap();
        let mut pair = vec![a.clone(), b.clone()];
        sync_members(&mut pair, 1.0).unwrap();
        assert!(pair[0].parameters().iter().all(|x| x.abs() < 1e-15));
        assert_eq!(pair[0], pair[1]);

        // rho = 0.5 halves the distance to the centre (zero here)
        let mut pair = vec![a, b];
        sync_members(&mut pair, 0.5).unwrap();
        for (x, y) in pair[0].parameters().iter().zip(&v) {
            assert!((x - 0.5 * y).abs() < 1e-15);
        }
    }

    #[test]
    fn sync_reduces_diversity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ens = ValueEnsemble::new(5, &[6], 4, 0.99, &mut rng).unwrap();
        let before = member_diversity(&ens.backward);
        ens.sync().unwrap();
        assert!(member_diversity(&ens.backward) < before);
    }
}
