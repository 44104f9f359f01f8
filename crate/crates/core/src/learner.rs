//! Online KL-to-reference soft policy iteration with temperature `τ = λ·b̂`
//! and projected dual ascent on the exposure budget.
//!
//! The critic is a table over augmented states `(s, bucket)`, where the bucket
//! is the exact age when the channel reveals it and a `b̂` bin otherwise. The
//! actor is the closed-form Gibbs policy `π* ∝ π_prior·exp(Q/τ)`. The same
//! engine with a fixed temperature, no age conditioning or a uniform prior
//! yields the soft-Q baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acting::ActingRule;
use crate::error::{Error, Result};
use crate::evidence::{agent_occupancy, reference_occupancy, tom_scalar, ExposureLedger, StateRatioTable};
use crate::mdp::{OccupancyProfile, TabularMdp};
use crate::monitoring::{AgeFilter, HazardModel, MonitorState, TokenChannel};
use crate::policy::{kl_rows, AugmentedPolicy, Conditioning, TabularPolicy};
use crate::rng::{derive_seed, sample_categorical, seeded};

/// `τ = max(λ·b̂, τ_min)`.
pub fn temperature(lambda: f64, b_hat: f64, tau_min: f64) -> f64 {
    (lambda * b_hat).max(tau_min)
}

/// `τ·ln Σ_a prior(a)·exp(Q(a)/τ)` with a max shift.
pub fn soft_value(q: &[f64], prior: &[f64], tau: f64) -> f64 {
    let m = q
        .iter()
        .zip(prior)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = q.iter().zip(prior).map(|(&x, &p)| p * ((x - m) / tau).exp()).sum();
    m + tau * z.ln()
}

/// `π*(a) ∝ prior(a)·exp(Q(a)/τ)`.
pub fn gibbs_policy(q: &[f64], prior: &[f64], tau: f64) -> Vec<f64> {
    let m = q
        .iter()
        .zip(prior)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = q.iter().zip(prior).map(|(&x, &p)| p * ((x - m) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    w
}

/// `y = R − τ·log r + γ·V'`.
pub fn td_target(reward: f64, tau: f64, log_ratio: f64, discount: f64, next_value: f64) -> f64 {
    reward - tau * log_ratio + discount * next_value
}

/// Tabular critic over `(state, bucket, action)` with a slowly blended target copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticTable {
    pub num_states: usize,
    pub num_buckets: usize,
    pub num_actions: usize,
    pub target_rate: f64,
    pub q: Vec<f64>,
    pub q_target: Vec<f64>,
}

impl CriticTable {
    pub fn new(num_states: usize, num_buckets: usize, num_actions: usize, target_rate: f64) -> Result<Self> {
        if !(target_rate > 0.0 && target_rate <= 1.0) {
            return Err(Error::param("target_rate", "must lie in (0, 1]"));
        }
        let n = num_states * num_buckets * num_actions;
        Ok(Self {
            num_states,
            num_buckets,
            num_actions,
            target_rate,
            q: vec![0.0; n],
            q_target: vec![0.0; n],
        })
    }

    fn offset(&self, s: usize, b: usize) -> usize {
        (s * self.num_buckets + b) * self.num_actions
    }

    pub fn row(&self, s: usize, b: usize) -> &[f64] {
        let i = self.offset(s, b);
        &self.q[i..i + self.num_actions]
    }

    pub fn target_row(&self, s: usize, b: usize) -> &[f64] {
        let i = self.offset(s, b);
        &self.q_target[i..i + self.num_actions]
    }
}

/// One critic sample. `next` is `None` at terminal transitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub bucket: usize,
    pub action: usize,
    pub reward: f64,
    /// Temperature at the sampled state, scaling the log-ratio penalty.
    pub tau: f64,
    pub log_ratio: f64,
    pub next: Option<(usize, usize)>,
}

/// One TD step toward `y` built from the target copy; blends the target entry
/// afterwards. Returns `y`.
pub fn critic_update(
    critic: &mut CriticTable,
    tr: &Transition,
    prior: &TabularPolicy,
    tau_next: f64,
    discount: f64,
    lr: f64,
) -> f64 {
    let next_value = match tr.next {
        Some((s2, b2)) => soft_value(critic.target_row(s2, b2), prior.row(s2), tau_next),
        None => 0.0,
    };
    let y = td_target(tr.reward, tr.tau, tr.log_ratio, discount, next_value);
    let i = critic.offset(tr.state, tr.bucket) + tr.action;
    critic.q[i] += lr * (y - critic.q[i]);
    let rho = critic.target_rate;
    critic.q_target[i] = (1.0 - rho) * critic.q_target[i] + rho * critic.q[i];
    y
}

/// Dual variable with budget `ε` and step size `η`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: f64,
    pub budget: f64,
    pub step_size: f64,
    /// Upper end of the projection interval.
    pub lambda_max: f64,
}

/// `λ ← clamp(λ + η(Ŝ − ε), 0, λ_max)`.
pub fn dual_update(dual: DualState, exposure_ema: f64) -> DualState {
    let lambda = (dual.lambda + dual.step_size * (exposure_ema - dual.budget)).clamp(0.0, dual.lambda_max);
    DualState { lambda, ..dual }
}

fn default_discount() -> f64 {
    0.99
}
fn default_critic_lr() -> f64 {
    0.2
}
fn default_critic_lr_end() -> f64 {
    0.02
}
fn default_ratio_clip() -> f64 {
    5.0
}
fn default_occupancy_blend() -> f64 {
    0.2
}
fn default_target_rate() -> f64 {
    0.5
}
fn default_lambda_init() -> f64 {
    1.0
}
fn default_dual_step() -> f64 {
    0.02
}
fn default_lambda_max() -> f64 {
    3.0
}
fn default_ema_decay() -> f64 {
    0.99
}
fn default_tau_min() -> f64 {
    0.01
}
fn default_explore_start() -> f64 {
    0.05
}
fn default_explore_fraction() -> f64 {
    0.7
}
fn default_episodes() -> usize {
    10_000
}
fn default_ratio_refresh() -> usize {
    10
}
fn default_ratio_floor() -> f64 {
    crate::evidence::DEFAULT_RATIO_FLOOR
}
fn default_belief_bins() -> usize {
    10
}
fn default_occupancy_samples() -> usize {
    2000
}

/// Learner hyperparameters. Only the budget has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub budget: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "default_critic_lr")]
    pub critic_lr: f64,
    /// Critic step size reached at the last episode (linear decay).
    #[serde(default = "default_critic_lr_end")]
    pub critic_lr_end: f64,
    #[serde(default = "default_target_rate")]
    pub target_rate: f64,
    /// Initial value of every critic entry.
    #[serde(default)]
    pub critic_init: f64,
    #[serde(default = "default_lambda_init")]
    pub lambda_init: f64,
    #[serde(default = "default_dual_step")]
    pub dual_step: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    /// Per-episode decay of the exposure average Ŝ.
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    #[serde(default = "default_explore_start")]
    pub explore_start: f64,
    #[serde(default)]
    pub explore_end: f64,
    /// Fraction of episodes over which exploration is annealed linearly.
    #[serde(default = "default_explore_fraction")]
    pub explore_fraction: f64,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Episodes between rebuilds of the state-ratio table.
    #[serde(default = "default_ratio_refresh")]
    pub ratio_refresh: usize,
    #[serde(default = "default_ratio_floor")]
    pub ratio_floor: f64,
    /// Bound on `|log r|` inside the critic's penalty; ψ stays unclipped.
    #[serde(default = "default_ratio_clip")]
    pub ratio_clip: f64,
    /// Weight of the fresh occupancy estimate when the ratio table is rebuilt.
    #[serde(default = "default_occupancy_blend")]
    pub occupancy_blend: f64,
    /// `b̂` bins for the augmented state when the age is not revealed.
    #[serde(default = "default_belief_bins")]
    pub belief_bins: usize,
    /// Episodes per Monte Carlo occupancy estimate when the age is not revealed.
    #[serde(default = "default_occupancy_samples")]
    pub occupancy_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            budget: 0.3,
            discount: default_discount(),
            critic_lr: default_critic_lr(),
            critic_lr_end: default_critic_lr_end(),
            target_rate: default_target_rate(),
            critic_init: 0.0,
            lambda_init: default_lambda_init(),
            dual_step: default_dual_step(),
            lambda_max: default_lambda_max(),
            ema_decay: default_ema_decay(),
            tau_min: default_tau_min(),
            explore_start: default_explore_start(),
            explore_end: 0.0,
            explore_fraction: default_explore_fraction(),
            episodes: default_episodes(),
            ratio_refresh: default_ratio_refresh(),
            ratio_floor: default_ratio_floor(),
            ratio_clip: default_ratio_clip(),
            occupancy_blend: default_occupancy_blend(),
            belief_bins: default_belief_bins(),
            occupancy_samples: default_occupancy_samples(),
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} is outside [0, 1]")))
            }
        };
        if !(self.budget >= 0.0) {
            return Err(Error::param("budget", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::param("discount", "must lie in [0, 1)"));
        }
        if !(self.critic_lr > 0.0 && self.critic_lr <= 1.0) {
            return Err(Error::param("critic_lr", "must lie in (0, 1]"));
        }
        if !(self.critic_lr_end > 0.0 && self.critic_lr_end <= 1.0) {
            return Err(Error::param("critic_lr_end", "must lie in (0, 1]"));
        }
        if !self.critic_init.is_finite() {
            return Err(Error::param("critic_init", "must be finite"));
        }
        if !(self.ratio_clip > 0.0) {
            return Err(Error::param("ratio_clip", "must be positive"));
        }
        if !(self.occupancy_blend > 0.0 && self.occupancy_blend <= 1.0) {
            return Err(Error::param("occupancy_blend", "must lie in (0, 1]"));
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(Error::param("target_rate", "must lie in (0, 1]"));
        }
        if !(self.lambda_init >= 0.0 && self.lambda_init <= self.lambda_max) {
            return Err(Error::param("lambda_init", "must lie in [0, lambda_max]"));
        }
        if !(self.dual_step > 0.0) {
            return Err(Error::param("dual_step", "must be positive"));
        }
        unit("ema_decay", self.ema_decay)?;
        unit("explore_start", self.explore_start)?;
        unit("explore_end", self.explore_end)?;
        unit("explore_fraction", self.explore_fraction)?;
        if !(self.tau_min > 0.0) {
            return Err(Error::param("tau_min", "must be positive"));
        }
        if self.episodes == 0 {
            return Err(Error::param("episodes", "must be positive"));
        }
        if self.ratio_refresh == 0 {
            return Err(Error::param("ratio_refresh", "must be positive"));
        }
        if !(self.ratio_floor > 0.0) {
            return Err(Error::param("ratio_floor", "must be positive"));
        }
        if self.belief_bins == 0 {
            return Err(Error::param("belief_bins", "must be positive"));
        }
        Ok(())
    }

    /// Critic step size at episode `e`.
    pub fn critic_rate(&self, e: usize) -> f64 {
        let x = e as f64 / self.episodes.max(2).saturating_sub(1) as f64;
        self.critic_lr + (self.critic_lr_end - self.critic_lr) * x.min(1.0)
    }

    /// Exploration probability at episode `e`.
    pub fn exploration(&self, e: usize) -> f64 {
        let span = (self.explore_fraction * self.episodes as f64).max(1.0);
        let x = (e as f64 / span).min(1.0);
        self.explore_start + (self.explore_end - self.explore_start) * x
    }
}

/// How the temperature is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemperatureRule {
    /// `τ = max(λ·b̂, τ_min)` with λ from dual ascent.
    Dual,
    /// `τ = max(value, τ_min)` everywhere.
    Fixed { value: f64 },
}

/// What the soft-Q engine optimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQSpec {
    /// Prior of the Gibbs policy and soft value.
    pub prior: TabularPolicy,
    /// Key the critic on the monitoring summary.
    pub monitor_conditioned: bool,
    pub temperature: TemperatureRule,
    /// Subtract `τ·log r_t(s)` in the TD target.
    pub ratio_penalty: bool,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub discounted_return: f64,
    pub exposure: f64,
    pub lambda: f64,
    pub exposure_ema: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAgent {
    pub policy: AugmentedPolicy,
    pub critic: CriticTable,
    pub dual: DualState,
    pub log: Vec<EpisodeLog>,
}

impl TrainedAgent {
    pub fn rule(&self) -> ActingRule {
        ActingRule::Policy(self.policy.clone())
    }
}

/// Critic conditioning for a given channel: exact age if revealed, `b̂` bins otherwise.
pub fn monitor_conditioning(hazard: &HazardModel, channel: &TokenChannel, bins: usize) -> Conditioning {
    if channel.reveals_age() {
        Conditioning::Age { max_age: hazard.upper() }
    } else {
        Conditioning::BeliefBins { bins }
    }
}

/// Representative `b̂` for each bucket.
fn bucket_belief(cond: Conditioning, hazard: &HazardModel, bucket: usize) -> f64 {
    match cond {
        Conditioning::None => 1.0,
        Conditioning::Age { .. } => hazard.at(bucket),
        Conditioning::BeliefBins { bins } => (bucket as f64 + 0.5) / bins as f64,
    }
}

struct Engine<'a> {
    mdp: &'a TabularMdp,
    hazard: &'a HazardModel,
    channel: TokenChannel,
    spec: &'a SoftQSpec,
    config: &'a LearnerConfig,
    cond: Conditioning,
    tau_rule: TemperatureRule,
}

impl Engine<'_> {
    fn tau(&self, lambda: f64, b_hat: f64) -> f64 {
        match self.tau_rule {
            TemperatureRule::Dual => temperature(lambda, b_hat, self.config.tau_min),
            TemperatureRule::Fixed { value } => value.max(self.config.tau_min),
        }
    }

    /// Gibbs rows per bucket, mixed with `explore` uniform mass.
    fn policy(&self, critic: &CriticTable, lambda: f64, explore: f64) -> Result<AugmentedPolicy> {
        let na = self.mdp.num_actions() as f64;
        AugmentedPolicy::from_fn(self.mdp.num_states(), self.mdp.num_actions(), self.cond, |s, b| {
            let tau = self.tau(lambda, bucket_belief(self.cond, self.hazard, b));
            let mut row = gibbs_policy(critic.row(s, b), self.spec.prior.row(s), tau);
            if explore > 0.0 {
                for p in &mut row {
                    *p = (1.0 - explore) * *p + explore / na;
                }
            }
            row
        })
    }

    /// State marginals of the behavior policy.
    fn occupancy(&self, critic: &CriticTable, lambda: f64, explore: f64, seed: u64) -> Result<OccupancyProfile> {
        let rule = ActingRule::Policy(self.policy(critic, lambda, explore)?);
        agent_occupancy(self.mdp, &rule, self.hazard, &self.channel, self.config.occupancy_samples, seed)
    }

    fn bucket(&self, filter: &AgeFilter) -> usize {
        let b_hat = filter.observation_probability();
        match self.cond {
            Conditioning::Age { .. } => self.cond.bucket(filter.exact_age(), b_hat),
            _ => self.cond.bucket(None, b_hat),
        }
    }

}

/// Trains the soft-Q engine online under simulated monitoring.
pub fn train_soft_q(
    mdp: &TabularMdp,
    pi_ref: &TabularPolicy,
    hazard: &HazardModel,
    channel: TokenChannel,
    spec: &SoftQSpec,
    config: &LearnerConfig,
) -> Result<TrainedAgent> {
    config.validate()?;
    if spec.prior.num_states() != mdp.num_states() || spec.prior.num_actions() != mdp.num_actions() {
        return Err(Error::DimensionMismatch("prior and mdp disagree on shape".into()));
    }
    if pi_ref.num_states() != mdp.num_states() || pi_ref.num_actions() != mdp.num_actions() {
        return Err(Error::DimensionMismatch("reference and mdp disagree on shape".into()));
    }
    if let TemperatureRule::Fixed { value } = spec.temperature {
        if !(value >= 0.0) {
            return Err(Error::param("temperature", "must be non-negative"));
        }
    }
    let cond = if spec.monitor_conditioned {
        monitor_conditioning(hazard, &channel, config.belief_bins)
    } else {
        Conditioning::None
    };
    let engine = Engine {
        mdp,
        hazard,
        channel,
        spec,
        config,
        cond,
        tau_rule: spec.temperature,
    };
    let na = mdp.num_actions();
    let uniform = vec![1.0 / na as f64; na];
    let mut critic = CriticTable::new(mdp.num_states(), cond.num_buckets(), na, config.target_rate)?;
    critic.q.fill(config.critic_init);
    critic.q_target.fill(config.critic_init);
    let mut dual = DualState {
        lambda: config.lambda_init,
        budget: config.budget,
        step_size: config.dual_step,
        lambda_max: config.lambda_max,
    };
    let mut ledger = ExposureLedger::new(config.discount, config.ema_decay);
    let mut ratio: Option<StateRatioTable> = None;
    let mut occupancy: Option<OccupancyProfile> = None;
    let reference = reference_occupancy(mdp, pi_ref)?;
    let mut log = Vec::with_capacity(config.episodes);
    let gamma = config.discount;

    for e in 0..config.episodes {
        let explore = config.exploration(e);
        if (spec.ratio_penalty || matches!(spec.temperature, TemperatureRule::Dual)) && e % config.ratio_refresh == 0 {
            let fresh = engine.occupancy(&critic, dual.lambda, explore, derive_seed(config.seed, u64::MAX - e as u64))?;
            let blended = match occupancy.take() {
                Some(mut old) => {
                    let beta = config.occupancy_blend;
                    for (o, f) in old.marginals.iter_mut().zip(&fresh.marginals) {
                        for (x, y) in o.iter_mut().zip(f) {
                            *x = (1.0 - beta) * *x + beta * y;
                        }
                    }
                    old
                }
                None => fresh,
            };
            ratio = Some(StateRatioTable::from_profiles(&blended, &reference, config.ratio_floor)?);
            occupancy = Some(blended);
        }
        let lr = config.critic_rate(e);
        let mut rng = seeded(derive_seed(config.seed, e as u64));
        let mut monitor = MonitorState::new();
        let mut filter = AgeFilter::new(hazard.clone(), channel);
        let mut s = mdp.sample_initial(&mut rng);
        let mut pending: Option<Transition> = None;
        let mut ret = 0.0;
        let mut w = 1.0;
        for t in 0..mdp.horizon() {
            if mdp.is_absorbing(s) {
                break;
            }
            let (_, due) = monitor.tick(hazard, &channel, &mut rng);
            for tok in due {
                filter.apply_token(Some(tok.value))?;
            }
            let b_hat = filter.observation_probability();
            let bucket = engine.bucket(&filter);
            let tau = engine.tau(dual.lambda, b_hat);
            if let Some(mut tr) = pending.take() {
                tr.next = Some((s, bucket));
                critic_update(&mut critic, &tr, &spec.prior, tau, gamma, lr);
            }
            let target = gibbs_policy(critic.row(s, bucket), spec.prior.row(s), tau);
            let behavior: Vec<f64> = target.iter().zip(&uniform).map(|(p, u)| (1.0 - explore) * p + explore * u).collect();
            let a = sample_categorical(&behavior, &mut rng);
            let log_r = ratio.as_ref().map_or(0.0, |r| r.log_ratio(t, s));
            let delta = kl_rows(&behavior, pi_ref.row(s)).map_err(|action| Error::AbsoluteContinuity { state: s, action })?;
            ledger.push(tom_scalar(b_hat, log_r, delta).at(t));
            let r = mdp.reward(s, a);
            ret += w * r;
            w *= mdp.discount();
            pending = Some(Transition {
                state: s,
                bucket,
                action: a,
                reward: r,
                tau,
                log_ratio: if spec.ratio_penalty {
                    log_r.clamp(-config.ratio_clip, config.ratio_clip)
                } else {
                    0.0
                },
                next: None,
            });
            s = mdp.sample_next(s, a, &mut rng);
            filter.predict();
        }
        if let Some(mut tr) = pending.take() {
            let mut tau_next = 0.0;
            if !mdp.is_absorbing(s) {
                // Horizon cut: bootstrap from the state the episode was truncated in.
                for tok in monitor.take_due() {
                    filter.apply_token(Some(tok.value))?;
                }
                let bucket = engine.bucket(&filter);
                tau_next = engine.tau(dual.lambda, filter.observation_probability());
                tr.next = Some((s, bucket));
            }
            critic_update(&mut critic, &tr, &spec.prior, tau_next.max(config.tau_min), gamma, lr);
        }
        let exposure = ledger.finish_episode();
        let ema = ledger.episode_ema().unwrap_or(exposure);
        if matches!(spec.temperature, TemperatureRule::Dual) {
            dual = dual_update(dual, ema);
        }
        log.push(EpisodeLog {
            episode: e,
            discounted_return: ret,
            exposure,
            lambda: dual.lambda,
            exposure_ema: ema,
        });
    }
    let policy = engine.policy(&critic, dual.lambda, 0.0)?;
    Ok(TrainedAgent {
        policy,
        critic,
        dual,
        log,
    })
}

/// The ToM learner: prior `π^S`, monitor-conditioned critic, `τ = λ·b̂`,
/// log-ratio penalty and dual ascent on the budget.
pub fn train_online(
    mdp: &TabularMdp,
    pi_ref: &TabularPolicy,
    hazard: &HazardModel,
    channel: TokenChannel,
    config: &LearnerConfig,
) -> Result<TrainedAgent> {
    let spec = SoftQSpec {
        prior: pi_ref.clone(),
        monitor_conditioned: true,
        temperature: TemperatureRule::Dual,
        ratio_penalty: true,
    };
    train_soft_q(mdp, pi_ref, hazard, channel, &spec, config)
}

/// Greedy action of a row; ties go to the lowest index.
pub fn greedy_action(q: &[f64]) -> usize {
    crate::policy::argmax_row(q)
}

/// Samples the executed action for a raw Gibbs row with exploration, for callers
/// replaying the learner outside training.
pub fn explore_sample<R: Rng + ?Sized>(row: &[f64], explore: f64, rng: &mut R) -> usize {
    let na = row.len() as f64;
    let mixed: Vec<f64> = row.iter().map(|p| (1.0 - explore) * p + explore / na).collect();
    sample_categorical(&mixed, rng)
}
