//! Comparison policies. The trained ones share the soft-Q engine of the
//! learner with a fixed temperature, so the monitor weighting is the only
//! thing that differs from the ToM agent.

use serde::{Deserialize, Serialize};

use crate::acting::ActingRule;
use crate::error::{Error, Result};
use crate::learner::{train_soft_q, LearnerConfig, SoftQSpec, TemperatureRule, TrainedAgent};
use crate::mdp::TabularMdp;
use crate::monitoring::{HazardModel, TokenChannel};
use crate::policy::{AugmentedPolicy, TabularPolicy};
use crate::rng::{sample_categorical, seeded};

fn default_selfish_temperature() -> f64 {
    0.01
}
fn default_k() -> usize {
    1
}
fn default_smoothing() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineSpec {
    AlwaysCompliant,
    Selfish {
        #[serde(default = "default_selfish_temperature")]
        temperature: f64,
    },
    /// Penalty `weight·(log r + log π/π^S)` at every step.
    MultiObjective { weight: f64 },
    /// Constant-temperature KL to the reference.
    KlConstant { tau: f64 },
    Shielded {
        threshold: f64,
        #[serde(default = "default_k")]
        k: usize,
    },
    FixedBlend { alpha: f64 },
    HazardSwitch { threshold: f64 },
    BehaviorClone {
        samples: usize,
        #[serde(default = "default_smoothing")]
        smoothing: f64,
    },
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::param(name, format!("{v} is outside [0, 1]")))
    }
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineSpec::AlwaysCompliant => Ok(()),
            BaselineSpec::Selfish { temperature } if !(temperature > 0.0) => {
                Err(Error::param("temperature", "must be positive"))
            }
            BaselineSpec::MultiObjective { weight } if !(weight >= 0.0) => {
                Err(Error::param("weight", "must be non-negative"))
            }
            BaselineSpec::KlConstant { tau } if !(tau > 0.0) => Err(Error::param("tau", "must be positive")),
            BaselineSpec::Shielded { threshold, k } => {
                unit("threshold", threshold)?;
                if k == 0 {
                    return Err(Error::param("k", "must be at least 1"));
                }
                Ok(())
            }
            BaselineSpec::FixedBlend { alpha } => unit("alpha", alpha),
            BaselineSpec::HazardSwitch { threshold } => unit("threshold", threshold),
            BaselineSpec::BehaviorClone { smoothing, .. } if !(smoothing > 0.0) => {
                Err(Error::param("smoothing", "must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Row label used in comparison tables.
    pub fn name(&self) -> &'static str {
        match self {
            BaselineSpec::AlwaysCompliant => "always_compliant",
            BaselineSpec::Selfish { .. } => "selfish",
            BaselineSpec::MultiObjective { .. } => "multi_objective",
            BaselineSpec::KlConstant { .. } => "kl_constant",
            BaselineSpec::Shielded { .. } => "shielded",
            BaselineSpec::FixedBlend { .. } => "fixed_blend",
            BaselineSpec::HazardSwitch { .. } => "hazard_switch",
            BaselineSpec::BehaviorClone { .. } => "behavior_clone",
        }
    }

    /// Whether building the baseline needs the selfish task policy.
    pub fn needs_task(&self) -> bool {
        matches!(
            self,
            BaselineSpec::Shielded { .. } | BaselineSpec::FixedBlend { .. } | BaselineSpec::HazardSwitch { .. }
        )
    }

    /// The default line-up compared against the ToM learner.
    pub fn default_set() -> Vec<BaselineSpec> {
        vec![
            BaselineSpec::AlwaysCompliant,
            BaselineSpec::Selfish { temperature: 0.01 },
            BaselineSpec::MultiObjective { weight: 0.1 },
            BaselineSpec::KlConstant { tau: 0.1 },
            BaselineSpec::Shielded { threshold: 0.5, k: 1 },
            BaselineSpec::FixedBlend { alpha: 0.5 },
            BaselineSpec::HazardSwitch { threshold: 0.5 },
            BaselineSpec::BehaviorClone {
                samples: 200,
                smoothing: 1.0,
            },
        ]
    }
}

/// Everything a baseline may need besides its own knobs.
#[derive(Debug, Clone, Copy)]
pub struct BaselineContext<'a> {
    pub mdp: &'a TabularMdp,
    pub pi_ref: &'a TabularPolicy,
    pub hazard: &'a HazardModel,
    pub channel: TokenChannel,
    pub config: &'a LearnerConfig,
}

fn fixed(ctx: &BaselineContext<'_>, prior: TabularPolicy, value: f64, ratio_penalty: bool) -> Result<TrainedAgent> {
    let spec = SoftQSpec {
        prior,
        monitor_conditioned: false,
        temperature: TemperatureRule::Fixed { value },
        ratio_penalty,
    };
    train_soft_q(ctx.mdp, ctx.pi_ref, ctx.hazard, ctx.channel, &spec, ctx.config)
}

pub fn always_compliant(pi_ref: &TabularPolicy) -> TabularPolicy {
    pi_ref.clone()
}

/// Task reward only: uniform prior, small fixed temperature.
pub fn selfish(ctx: &BaselineContext<'_>, temperature: f64) -> Result<TrainedAgent> {
    let n = ctx.mdp.num_states();
    let na = ctx.mdp.num_actions();
    fixed(ctx, TabularPolicy::uniform(n, na), temperature, false)
}

pub fn multi_objective(ctx: &BaselineContext<'_>, weight: f64) -> Result<TrainedAgent> {
    if !(weight >= 0.0) {
        return Err(Error::param("weight", "must be non-negative"));
    }
    fixed(ctx, ctx.pi_ref.clone(), weight, true)
}

pub fn kl_constant(ctx: &BaselineContext<'_>, tau: f64) -> Result<TrainedAgent> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", "must be positive"));
    }
    fixed(ctx, ctx.pi_ref.clone(), tau, false)
}

pub fn shielded(task: AugmentedPolicy, pi_ref: &TabularPolicy, threshold: f64, k: usize) -> Result<ActingRule> {
    ActingRule::shielded(task, pi_ref.clone(), threshold, k)
}

pub fn hazard_switch(task: AugmentedPolicy, pi_ref: &TabularPolicy, threshold: f64) -> Result<ActingRule> {
    ActingRule::hazard_switch(task, pi_ref.clone(), threshold)
}

/// `α·π^S + (1−α)·task`, row by row in every bucket of the task policy.
pub fn fixed_blend(task: &AugmentedPolicy, pi_ref: &TabularPolicy, alpha: f64) -> Result<AugmentedPolicy> {
    unit("alpha", alpha)?;
    if task.num_states() != pi_ref.num_states() || task.num_actions() != pi_ref.num_actions() {
        return Err(Error::DimensionMismatch("task and reference policies disagree on shape".into()));
    }
    let lifted = AugmentedPolicy::from_fn(task.num_states(), task.num_actions(), task.conditioning(), |s, _| {
        pi_ref.row(s).to_vec()
    })?;
    lifted.mix(task, alpha)
}

/// Smoothed per-state action frequencies. Unvisited states stay uniform.
pub fn behavior_clone(
    pairs: &[(usize, usize)],
    num_states: usize,
    num_actions: usize,
    smoothing: f64,
) -> Result<TabularPolicy> {
    if !(smoothing > 0.0) {
        return Err(Error::param("smoothing", "must be positive"));
    }
    let mut counts = vec![smoothing; num_states * num_actions];
    for &(s, a) in pairs {
        if s >= num_states || a >= num_actions {
            return Err(Error::DimensionMismatch(format!("pair ({s}, {a}) is out of range")));
        }
        counts[s * num_actions + a] += 1.0;
    }
    for row in counts.chunks_mut(num_actions) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|c| *c /= z);
    }
    TabularPolicy::new(num_states, num_actions, counts)
}

/// `(s, a)` pairs from reference rollouts, as a demonstrator would record them.
pub fn reference_pairs(mdp: &TabularMdp, pi_ref: &TabularPolicy, samples: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = seeded(seed);
    let mut pairs = Vec::with_capacity(samples);
    while pairs.len() < samples {
        let mut s = mdp.sample_initial(&mut rng);
        for _ in 0..mdp.horizon() {
            if pairs.len() == samples || mdp.is_absorbing(s) {
                break;
            }
            let a = sample_categorical(pi_ref.row(s), &mut rng);
            pairs.push((s, a));
            s = mdp.sample_next(s, a, &mut rng);
        }
    }
    pairs
}

/// Builds the acting rule of a baseline. `task` is the selfish policy the
/// shield, blend and switch wrap; it is required only when `needs_task`.
pub fn build(spec: &BaselineSpec, ctx: &BaselineContext<'_>, task: Option<&AugmentedPolicy>) -> Result<ActingRule> {
    spec.validate()?;
    let need = || task.cloned().ok_or_else(|| Error::Config(format!("{} needs a task policy", spec.name())));
    Ok(match *spec {
        BaselineSpec::AlwaysCompliant => always_compliant(ctx.pi_ref).into(),
        BaselineSpec::Selfish { temperature } => selfish(ctx, temperature)?.rule(),
        BaselineSpec::MultiObjective { weight } => multi_objective(ctx, weight)?.rule(),
        BaselineSpec::KlConstant { tau } => kl_constant(ctx, tau)?.rule(),
        BaselineSpec::Shielded { threshold, k } => shielded(need()?, ctx.pi_ref, threshold, k)?,
        BaselineSpec::FixedBlend { alpha } => fixed_blend(&need()?, ctx.pi_ref, alpha)?.into(),
        BaselineSpec::HazardSwitch { threshold } => hazard_switch(need()?, ctx.pi_ref, threshold)?,
        BaselineSpec::BehaviorClone { samples, smoothing } => {
            let pairs = reference_pairs(ctx.mdp, ctx.pi_ref, samples, ctx.config.seed);
            behavior_clone(&pairs, ctx.mdp.num_states(), ctx.mdp.num_actions(), smoothing)?.into()
        }
    })
}
