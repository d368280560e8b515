//! Training loops for COIN and the baselines.
//!
//! One epoch is one episode. COIN rollouts draw `a ~ N(mu, std)` and act
//! through the safety layer. Where the state-level constraint holds the
//! policy takes a behaviour-cloning step; where it does not it takes the
//! safeguard step `theta -= lr * grad log pi(a | s) * Q(s, a)` at the sampled
//! action. The first `warmup_epochs` epochs skip the safety layer so the
//! value heads see unprojected actions. After the episode the backward heads are fitted to the
//! discounted running cost in time order and the forward heads and `Q` to the
//! discounted cost-to-go in reverse order.
//!
//! Costs fed to the value heads are divided by the horizon, so `b` estimates
//! the trajectory-mean cost and is compared directly with `g`.

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chance::{
    project, regress, ChanceConfig, ConstraintEvaluation, Projection, ValueEnsemble,
};
use crate::env::{worst_case_clip, Environment, StartMode, StepInfo};
use crate::error::{Error, Result};
use crate::nn::{log_prob_gradient, GradientTape, Mlp, OutputKind};

/// Which learner to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Coin,
    Bc,
    BcHard,
    Grid,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Coin => "coin",
            Method::Bc => "bc",
            Method::BcHard => "bc_hard",
            Method::Grid => "grid",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coin" => Ok(Method::Coin),
            "bc" => Ok(Method::Bc),
            "bc_hard" | "bc-hard" => Ok(Method::BcHard),
            "grid" => Ok(Method::Grid),
            _ => Err(Error::Config(format!("unknown method {s}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    /// Episodes; one epoch is one episode.
    pub epochs: usize,
    /// Policy steps accumulated before each parameter update.
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub hidden: Vec<usize>,
    /// Std of the Gaussian policy used in COIN training rollouts.
    pub policy_std: f64,
    /// Epochs between ensemble synchronisations.
    pub sync_interval: usize,
    pub sync_rate: f64,
    /// Replays of each episode for the value heads.
    pub value_passes: usize,
    /// Initial COIN epochs that only fit the value heads and clone the
    /// expert; the safety layer is consulted afterwards.
    pub warmup_epochs: usize,
    pub grid_rate: f64,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    pub start_mode: StartMode,
    pub seed: u64,
    pub chance: ChanceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Coin,
            epochs: 200,
            batch_size: 1,
            lr_policy: 1e-3,
            lr_value: 1e-2,
            hidden: vec![64, 64],
            policy_std: 0.05,
            sync_interval: 10,
            sync_rate: 0.5,
            value_passes: 5,
            warmup_epochs: 50,
            grid_rate: 0.5,
            checkpoint_interval: 0,
            start_mode: StartMode::Cold,
            seed: 0,
            chance: ChanceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.chance.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.value_passes == 0 || self.sync_interval == 0 {
            return Err(Error::Config(
                "batch_size, value_passes and sync_interval must be >= 1".into(),
            ));
        }
        if !(self.lr_policy > 0.0 && self.lr_value > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.policy_std > 0.0) {
            return Err(Error::Config("policy_std must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.grid_rate) {
            return Err(Error::Config(format!(
                "grid_rate {} outside [0, 1]",
                self.grid_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.sync_rate) {
            return Err(Error::Config(format!(
                "sync_rate {} outside [0, 1]",
                self.sync_rate
            )));
        }
        Ok(())
    }
}

/// One decision of a deployed policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: f64,
    /// Policy output before any correction.
    pub raw_action: f64,
    pub evaluation: Option<ConstraintEvaluation>,
    pub projection: Option<Projection>,
}

/// Format version of serialised policies.
pub const POLICY_VERSION: u32 = 1;

/// A trained policy together with whatever it needs at decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub version: u32,
    pub method: Method,
    pub net: Option<Mlp>,
    pub ensemble: Option<ValueEnsemble>,
    pub chance: ChanceConfig,
    pub grid_rate: f64,
}

impl TrainedPolicy {
    pub fn constant(rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("grid rate {rate} outside [0, 1]")));
        }
        Ok(Self {
            version: POLICY_VERSION,
            method: Method::Grid,
            net: None,
            ensemble: None,
            chance: ChanceConfig::default(),
            grid_rate: rate,
        })
    }

    fn net(&self) -> Result<&Mlp> {
        self.net
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} policy without a network", self.method)))
    }

    /// Action for the environment's current state.
    pub fn act<E: Environment + ?Sized>(&self, env: &E) -> Result<Decision> {
        match self.method {
            Method::Grid => Ok(Decision {
                action: self.grid_rate,
                raw_action: self.grid_rate,
                evaluation: None,
                projection: None,
            }),
            Method::Bc => {
                let a = self.net()?.forward(env.state())?;
                Ok(Decision {
                    action: a,
                    raw_action: a,
                    evaluation: None,
                    projection: None,
                })
            }
            Method::BcHard => {
                let a = self.net()?.forward(env.state())?;
                let action = worst_case_clip(env, a, self.chance.g)?;
                Ok(Decision {
                    action,
                    raw_action: a,
                    evaluation: None,
                    projection: None,
                })
            }
            Method::Coin => {
                let ensemble = self
                    .ensemble
                    .as_ref()
                    .ok_or_else(|| Error::Config("coin policy without a value ensemble".into()))?;
                let a = self.net()?.forward(env.state())?;
                let (eval, proj) = safety_layer(a, env, ensemble, &self.chance)?;
                Ok(Decision {
                    action: proj.action,
                    raw_action: a,
                    evaluation: Some(eval),
                    projection: Some(proj),
                })
            }
        }
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let p: Self = serde_json::from_reader(f)?;
        if p.version != POLICY_VERSION {
            return Err(Error::Schema(format!(
                "policy version {} unsupported",
                p.version
            )));
        }
        Ok(p)
    }
}

/// Constraint check and projection of `a_raw` at the current state, with
/// costs scaled by the horizon.
pub fn safety_layer<E: Environment + ?Sized>(
    a_raw: f64,
    env: &E,
    ensemble: &ValueEnsemble,
    chance: &ChanceConfig,
) -> Result<(ConstraintEvaluation, Projection)> {
    let s = env.state();
    let cost = env.cost() / env.horizon() as f64;
    let (g, delta) = chance.step_budget();
    let eval = ensemble.evaluate(s, cost, g, delta)?;
    let (q, d) = ensemble.q_and_action_gradient(s, a_raw)?;
    let proj = project(
        a_raw,
        eval.threshold,
        cost,
        eval.backward_value,
        q,
        d,
        env.safest_action(),
    );
    Ok((eval, proj))
}

/// One step of a recorded episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: Vec<f64>,
    /// `c(s_t)`
    pub cost: f64,
    pub action: f64,
    pub raw_action: f64,
    pub expert_action: f64,
    pub evaluation: Option<ConstraintEvaluation>,
    /// Whether the safeguard update fired at this step (training only).
    pub safeguard: bool,
    /// `c(s_{t+1})`
    pub next_cost: f64,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `c(s_0), ..., c(s_T)`.
    pub fn costs(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.steps.iter().map(|s| s.cost).collect();
        if let Some(last) = self.steps.last() {
            c.push(last.next_cost);
        }
        c
    }

    /// `(1/T) * sum_{t=1..T} c(s_t)`.
    pub fn mean_cost(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.next_cost).sum::<f64>() / self.steps.len() as f64
    }

    /// Mean squared gap between the raw policy output and the expert label.
    pub fn mse(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps
            .iter()
            .map(|s| (s.raw_action - s.expert_action).powi(2))
            .sum::<f64>()
            / self.steps.len() as f64
    }

    pub fn feasibility_rate(&self) -> Option<f64> {
        let evals: Vec<bool> = self
            .steps
            .iter()
            .filter_map(|s| s.evaluation.map(|e| e.feasible))
            .collect();
        (!evals.is_empty())
            .then(|| evals.iter().filter(|f| **f).count() as f64 / evals.len() as f64)
    }

    pub fn sigma_mean(&self) -> Option<f64> {
        let s: Vec<f64> = self
            .steps
            .iter()
            .filter_map(|s| s.evaluation.map(|e| e.sigma))
            .collect();
        (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
    }

    pub fn cloud_infos(&self) -> Vec<crate::env::CloudStepInfo> {
        self.steps
            .iter()
            .filter_map(|s| match &s.info {
                StepInfo::Cloud(i) => Some(i.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn airline_infos(&self) -> Vec<crate::env::AirlineStepInfo> {
        self.steps
            .iter()
            .filter_map(|s| match &s.info {
                StepInfo::Airline(i) => Some(i.clone()),
                _ => None,
            })
            .collect()
    }

    /// Average hot PMs per step for the cloud, percent offload ratio for the airline.
    pub fn hot_metric(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .steps
            .iter()
            .map(|s| match &s.info {
                StepInfo::Cloud(i) => i.pm_hot.iter().filter(|h| **h).count() as f64,
                StepInfo::Airline(i) => 100.0 * i.offloaded as f64 / i.onboard.max(1) as f64,
            })
            .sum();
        total / self.steps.len() as f64
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub mse: f64,
    pub mean_cost: f64,
    pub hot_metric: f64,
    pub feasibility_rate: f64,
    pub sigma_mean: f64,
}

impl LogRow {
    fn from_episode(epoch: usize, ep: &EpisodeRecord) -> Self {
        Self {
            epoch,
            mse: ep.mse(),
            mean_cost: ep.mean_cost(),
            hot_metric: ep.hot_metric(),
            feasibility_rate: ep.feasibility_rate().unwrap_or(1.0),
            sigma_mean: ep.sigma_mean().unwrap_or(0.0),
        }
    }
}

pub fn write_log_csv<W: std::io::Write>(rows: &[LogRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv<R: std::io::Read>(r: R) -> Result<Vec<LogRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Last policy with finite parameters.
    pub policy: TrainedPolicy,
    pub log: Vec<LogRow>,
    /// Set when training stopped on a non-finite value.
    pub aborted: Option<String>,
}

/// Seed of the episode played at `epoch`.
pub fn episode_seed(seed: u64, epoch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng.set_word_pos(2 * epoch as u128);
    rng.random()
}

/// Play one episode with a frozen policy.
pub fn run_episode<E: Environment + ?Sized>(
    env: &mut E,
    policy: &TrainedPolicy,
    mode: StartMode,
    seed: u64,
) -> Result<EpisodeRecord> {
    env.reset(mode, seed)?;
    let mut ep = EpisodeRecord::default();
    while !env.is_done() {
        let state = env.state().to_vec();
        let cost = env.cost();
        let expert_action = env.expert_action();
        let d = policy.act(env)?;
        let tr = env.step(d.action)?;
        ep.steps.push(StepRecord {
            state,
            cost,
            action: d.action,
            raw_action: d.raw_action,
            expert_action,
            evaluation: d.evaluation,
            safeguard: false,
            next_cost: tr.cost,
            info: tr.info,
        });
    }
    ep.final_state = env.state().to_vec();
    Ok(ep)
}

/// Constant-rate baseline; no training.
pub fn grid_policy(rate: f64) -> Result<TrainedPolicy> {
    TrainedPolicy::constant(rate)
}

pub fn train_coin<E: Environment + ?Sized>(env: &mut E, cfg: &TrainConfig) -> Result<TrainOutput> {
    train(
        env,
        &TrainConfig {
            method: Method::Coin,
            ..cfg.clone()
        },
    )
}

pub fn train_bc<E: Environment + ?Sized>(env: &mut E, cfg: &TrainConfig) -> Result<TrainOutput> {
    train(
        env,
        &TrainConfig {
            method: Method::Bc,
            ..cfg.clone()
        },
    )
}

pub fn train_bc_hard<E: Environment + ?Sized>(
    env: &mut E,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train(
        env,
        &TrainConfig {
            method: Method::BcHard,
            ..cfg.clone()
        },
    )
}

/// Accumulates policy gradients over `batch_size` steps.
struct PolicyBatch {
    tape: GradientTape,
    count: usize,
    size: usize,
}

impl PolicyBatch {
    fn new(net: &Mlp, size: usize) -> Self {
        Self {
            tape: GradientTape::zeros_like(net),
            count: 0,
            size,
        }
    }

    fn push(&mut self, net: &mut Mlp, grad: &GradientTape, lr: f64) -> Result<()> {
        self.tape.add_scaled(grad, 1.0)?;
        self.count += 1;
        if self.count == self.size {
            self.flush(net, lr)?;
        }
        Ok(())
    }

    fn flush(&mut self, net: &mut Mlp, lr: f64) -> Result<()> {
        if self.count > 0 {
            self.tape.scale(1.0 / self.count as f64);
            net.sgd_step(&self.tape, lr)?;
            self.tape.scale(0.0);
            self.count = 0;
        }
        Ok(())
    }
}

/// Callbacks invoked during training.
pub trait TrainHook {
    /// Every completed training episode.
    fn episode(&mut self, _epoch: usize, _ep: &EpisodeRecord) -> Result<()> {
        Ok(())
    }

    /// Every `checkpoint_interval` epochs, with the number of epochs done.
    fn checkpoint(&mut self, _epochs_done: usize, _policy: &TrainedPolicy) -> Result<()> {
        Ok(())
    }
}

impl TrainHook for () {}

/// Checkpoint-only hook.
impl<F: FnMut(usize, &TrainedPolicy) -> Result<()>> TrainHook for F {
    fn checkpoint(&mut self, epochs_done: usize, policy: &TrainedPolicy) -> Result<()> {
        self(epochs_done, policy)
    }
}

/// Train the method selected in `cfg`.
pub fn train<E: Environment + ?Sized>(env: &mut E, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with_hook(env, cfg, &mut ())
}

/// Like [`train`], reporting episodes and checkpoints to `hook`.
pub fn train_with_hook<E: Environment + ?Sized>(
    env: &mut E,
    cfg: &TrainConfig,
    hook: &mut dyn TrainHook,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if env.horizon() != cfg.chance.horizon {
        return Err(Error::Config(format!(
            "environment horizon {} differs from configured horizon {}",
            env.horizon(),
            cfg.chance.horizon
        )));
    }
    if cfg.method == Method::Grid {
        return Ok(TrainOutput {
            policy: grid_policy(cfg.grid_rate)?,
            log: Vec::new(),
            aborted: None,
        });
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut boot_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    boot_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(4);
    let dim = env.state_dim();
    let mut sizes = vec![dim];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mut net = Mlp::new(&sizes, OutputKind::Logistic, &mut init_rng)?;
    let mut ensemble = if cfg.method == Method::Coin {
        let mut e = ValueEnsemble::new(
            dim,
            &cfg.hidden,
            cfg.chance.ensemble_size,
            cfg.chance.gamma,
            &mut init_rng,
        )?;
        e.sync_interval = cfg.sync_interval;
        e.sync_rate = cfg.sync_rate;
        Some(e)
    } else {
        None
    };

    let snapshot = |net: &Mlp, ensemble: &Option<ValueEnsemble>| TrainedPolicy {
        version: POLICY_VERSION,
        method: cfg.method,
        net: Some(net.clone()),
        ensemble: ensemble.clone(),
        chance: cfg.chance.clone(),
        grid_rate: cfg.grid_rate,
    };
    let mut last_good = snapshot(&net, &ensemble);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let outcome = run_training_episode(
            env,
            cfg,
            &mut net,
            ensemble.as_mut(),
            &mut boot_rng,
            &mut noise_rng,
            epoch,
        );
        let ep = match outcome {
            Ok(ep) => ep,
            Err(Error::NonFinite(what)) => {
                let reason = format!("epoch {epoch}: non-finite {what}");
                warn!("training aborted, {reason}");
                return Ok(TrainOutput {
                    policy: last_good,
                    log,
                    aborted: Some(reason),
                });
            }
            Err(e) => return Err(e),
        };
        hook.episode(epoch, &ep)?;
        let row = LogRow::from_episode(epoch, &ep);
        if ![row.mse, row.mean_cost, row.sigma_mean]
            .iter()
            .all(|v| v.is_finite())
        {
            let reason = format!("epoch {epoch}: non-finite training statistics");
            warn!("training aborted, {reason}");
            return Ok(TrainOutput {
                policy: last_good,
                log,
                aborted: Some(reason),
            });
        }
        debug!(
            "{} epoch {epoch}: mse {:.4e} cost {:.4} feasible {:.2}",
            cfg.method, row.mse, row.mean_cost, row.feasibility_rate
        );
        log.push(row);
        last_good = snapshot(&net, &ensemble);
        if cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0 {
            hook.checkpoint(epoch + 1, &last_good)?;
        }
    }
    Ok(TrainOutput {
        policy: last_good,
        log,
        aborted: None,
    })
}

fn run_training_episode<E: Environment + ?Sized>(
    env: &mut E,
    cfg: &TrainConfig,
    net: &mut Mlp,
    mut ensemble: Option<&mut ValueEnsemble>,
    boot_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpisodeRecord> {
    env.reset(cfg.start_mode, episode_seed(cfg.seed, epoch))?;
    let mut batch = PolicyBatch::new(net, cfg.batch_size);
    let mut ep = EpisodeRecord::default();
    let g = cfg.chance.g;

    while !env.is_done() {
        let state = env.state().to_vec();
        let cost = env.cost();
        let expert = env.expert_action();
        let acts = net.forward_cached(&state)?;
        let mu = acts.output();
        if !mu.is_finite() {
            return Err(Error::NonFinite("policy output".into()));
        }

        let mut evaluation = None;
        let mut safeguard = false;
        let (action, grad) = match cfg.method {
            Method::Bc => (mu, net.backward(&acts, 2.0 * (mu - expert))?),
            Method::BcHard => {
                let target = worst_case_clip(env, expert, g)?;
                (
                    worst_case_clip(env, mu, g)?,
                    net.backward(&acts, 2.0 * (mu - target))?,
                )
            }
            Method::Coin => {
                let ens = ensemble.as_deref().expect("coin trains with an ensemble");
                // training rollouts draw from the Gaussian policy so that Q sees
                // action variation and the score below is taken at a policy sample
                let z: f64 = StandardNormal.sample(noise_rng);
                let sample = (mu + cfg.policy_std * z).clamp(0.0, 1.0);
                if epoch < cfg.warmup_epochs {
                    (sample, net.backward(&acts, 2.0 * (mu - expert))?)
                } else {
                    let (eval, proj) = safety_layer(sample, env, ens, &cfg.chance)?;
                    evaluation = Some(eval);
                    let grad = if eval.feasible {
                        net.backward(&acts, 2.0 * (mu - expert))?
                    } else {
                        safeguard = true;
                        let q = ens.q_value(&state, sample)?;
                        let mut tape = log_prob_gradient(net, &state, sample, cfg.policy_std)?;
                        tape.scale(q);
                        tape
                    };
                    (proj.action, grad)
                }
            }
            Method::Grid => unreachable!("grid policies are not trained"),
        };
        batch.push(net, &grad, cfg.lr_policy)?;

        let tr = env.step(action)?;
        ep.steps.push(StepRecord {
            state,
            cost,
            action,
            raw_action: mu,
            expert_action: expert,
            evaluation,
            safeguard,
            next_cost: tr.cost,
            info: tr.info,
        });
    }
    batch.flush(net, cfg.lr_policy)?;
    ep.final_state = env.state().to_vec();

    if let Some(ens) = ensemble.as_mut() {
        fit_values(ens, &ep, env.horizon(), cfg, boot_rng)?;
        if (epoch + 1).is_multiple_of(ens.sync_interval) {
            ens.sync()?;
        }
        if !ens.is_finite() {
            return Err(Error::NonFinite("value ensemble parameter".into()));
        }
    }
    Ok(ep)
}

/// Post-episode value fitting. Each member sees each state with a Poisson(1)
/// bootstrap weight so the members stay diverse.
fn fit_values(
    ens: &mut ValueEnsemble,
    ep: &EpisodeRecord,
    horizon: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let scale = 1.0 / horizon as f64;
    let costs: Vec<f64> = ep.costs().iter().map(|c| c * scale).collect();
    let mut states: Vec<&[f64]> = ep.steps.iter().map(|s| s.state.as_slice()).collect();
    states.push(&ep.final_state);
    let gamma = ens.gamma;
    let lr = cfg.lr_value;
    let poisson = Poisson::new(1.0).map_err(|e| Error::Config(e.to_string()))?;
    let members = ens.members();

    for _ in 0..cfg.value_passes {
        let weights: Vec<Vec<f64>> = (0..members)
            .map(|_| (0..states.len()).map(|_| poisson.sample(rng)).collect())
            .collect();

        for (n, w) in weights.iter().enumerate() {
            let mut running = 0.0;
            for (t, s) in states.iter().enumerate() {
                running = costs[t] + gamma * running;
                if w[t] > 0.0 {
                    regress(&mut ens.backward[n], s, running, lr * w[t])?;
                }
            }
        }

        let mut to_go = vec![0.0; states.len()];
        let mut acc = 0.0;
        for t in (0..states.len()).rev() {
            acc = costs[t] + gamma * acc;
            to_go[t] = acc;
        }
        for (n, w) in weights.iter().enumerate() {
            for t in (0..states.len()).rev() {
                if w[t] > 0.0 {
                    regress(&mut ens.forward[n], states[t], to_go[t], lr * w[t])?;
                }
            }
        }
        for t in (0..ep.steps.len()).rev() {
            let mut x = ep.steps[t].state.clone();
            x.push(ep.steps[t].action);
            regress(&mut ens.action_value, &x, to_go[t], lr)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airlineenv::{AirlineConfig, AirlineEnv};

    fn small_airline() -> AirlineEnv {
        AirlineEnv::new(AirlineConfig {
            quarters: 8,
            ..Default::default()
        })
        .unwrap()
    }

    fn cfg(method: Method, epochs: usize) -> TrainConfig {
        TrainConfig {
            method,
            epochs,
            hidden: vec![8],
            chance: ChanceConfig {
                horizon: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn one_epoch_one_row() {
        for m in [Method::Coin, Method::Bc, Method::BcHard] {
            let out = train(&mut small_airline(), &cfg(m, 1)).unwrap();
            assert_eq!(out.log.len(), 1, "{m}");
            assert!(out.aborted.is_none());
        }
    }

    #[test]
    fn grid_is_untrained_constant() {
        let out = train(
            &mut small_airline(),
            &TrainConfig {
                grid_rate: 0.3,
                ..cfg(Method::Grid, 5)
            },
        )
        .unwrap();
        assert!(out.log.is_empty());
        let mut env = small_airline();
        let ep = run_episode(&mut env, &out.policy, StartMode::Cold, 1).unwrap();
        assert!(ep.steps.iter().all(|s| s.action == 0.3));
    }

    #[test]
    fn horizon_mismatch_rejected() {
        let mut c = cfg(Method::Bc, 1);
        c.chance.horizon = 9;
        assert!(matches!(
            train(&mut small_airline(), &c),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reproducible_logs() {
        let a = train(&mut small_airline(), &cfg(Method::Coin, 5)).unwrap();
        let b = train(&mut small_airline(), &cfg(Method::Coin, 5)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn checkpoints_at_interval() {
        let mut c = cfg(Method::Bc, 7);
        c.checkpoint_interval = 3;
        let mut seen = Vec::new();
        let mut hook = |e: usize, p: &TrainedPolicy| {
            seen.push((e, p.clone()));
            Ok(())
        };
        let out = train_with_hook(&mut small_airline(), &c, &mut hook).unwrap();
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![3, 6]);
        assert_eq!(out.log, train(&mut small_airline(), &c).unwrap().log);
    }

    #[test]
    fn episode_seeds_differ() {
        let s: Vec<u64> = (0..10).map(|e| episode_seed(3, e)).collect();
        for i in 0..s.len() {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(episode_seed(3, 4), s[4]);
    }

    #[test]
    fn log_csv_round_trip() {
        let out = train(&mut small_airline(), &cfg(Method::Bc, 3)).unwrap();
        let mut buf = Vec::new();
        write_log_csv(&out.log, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,mse,mean_cost,hot_metric,feasibility_rate,sigma_mean\n"));
        assert_eq!(read_log_csv(buf.as_slice()).unwrap(), out.log);
    }

    #[test]
    fn policy_json_round_trip() {
        let out = train(&mut small_airline(), &cfg(Method::Coin, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.json");
        out.policy.save_json(&p).unwrap();
        assert_eq!(TrainedPolicy::load_json(&p).unwrap(), out.policy);
    }

    #[test]
    fn diverging_run_aborts_with_snapshot() {
        let c = TrainConfig {
            lr_value: 1e300,
            ..cfg(Method::Coin, 3)
        };
        let out = train(&mut small_airline(), &c).unwrap();
        assert!(out.aborted.is_some());
        assert!(out.policy.ensemble.as_ref().unwrap().is_finite());
    }

    fn noisy_episode(rng: &mut ChaCha8Rng, noise: f64) -> EpisodeRecord {
        let info = StepInfo::Airline(crate::env::AirlineStepInfo {
            capacity: 1,
            demand: 0,
            sold: 0,
            shows: 0,
            onboard: 0,
            offloaded: 0,
            no_shows: 0,
            no_show_rate: 0.0,
        });
        let mut cost = || 0.5 + noise * rng.sample::<f64, _>(StandardNormal);
        let steps = (0..10)
            .map(|t| StepRecord {
                state: vec![t as f64 / 10.0, 1.0],
                cost: cost(),
                action: 0.5,
                raw_action: 0.5,
                expert_action: 0.5,
                evaluation: None,
                safeguard: false,
                next_cost: cost(),
                info: info.clone(),
            })
            .collect();
        EpisodeRecord {
            steps,
            final_state: vec![1.0, 1.0],
        }
    }

    #[test]
    fn ensemble_spread_grows_with_cost_noise() {
        let cfg = TrainConfig {
            lr_value: 1e-2,
            value_passes: 1,
            ..Default::default()
        };
        let spread: Vec<f64> = [0.0, 0.2, 0.6]
            .iter()
            .map(|noise| {
                let mut init = ChaCha8Rng::seed_from_u64(1);
                let mut ens = ValueEnsemble::new(2, &[8], 5, 1.0, &mut init).unwrap();
                let mut data = ChaCha8Rng::seed_from_u64(2);
                let mut boot = ChaCha8Rng::seed_from_u64(3);
                for _ in 0..300 {
                    let ep = noisy_episode(&mut data, *noise);
                    fit_values(&mut ens, &ep, 10, &cfg, &mut boot).unwrap();
                }
                (0..10)
                    .map(|t| {
                        ens.evaluate(&[t as f64 / 10.0, 1.0], 0.05, 1.0, 0.05)
                            .unwrap()
                            .sigma
                    })
                    .sum::<f64>()
                    / 10.0
            })
            .collect();
        assert!(spread[0] < spread[1] && spread[1] < spread[2], "{spread:?}");
    }
}
