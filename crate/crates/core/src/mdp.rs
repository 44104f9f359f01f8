//! Finite MDPs, exact state-marginal recursions and episode rollout.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;
use crate::rng::{sample_categorical, seeded};

pub const MDP_SCHEMA_VERSION: u32 = 1;

const ROW_TOL: f64 = 1e-9;

/// A finite, discounted, finite-horizon MDP with dense tables.
///
/// `transition` is row-major `[state][action][next_state]`, `reward` is
/// `[state][action]`. States flagged `absorbing` end an episode on entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
    horizon: usize,
    absorbing: Vec<bool>,
    successors: Vec<Vec<(usize, f64)>>,
}

/// One invariant violation reported by [`validate_mdp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub location: Option<(usize, usize)>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            Some((s, a)) => write!(f, "{} (state {s}, action {a}): {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

impl TabularMdp {
    /// Builds an MDP after shape checks only. Probabilistic invariants are
    /// reported by [`validate_mdp`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
        horizon: usize,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(Error::DimensionMismatch("states, actions and horizon must be positive".into()));
        }
        if transition.len() != num_states * num_actions * num_states {
            return Err(Error::DimensionMismatch(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                num_states * num_actions * num_states
            )));
        }
        if reward.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch("reward table shape".into()));
        }
        if initial_dist.len() != num_states {
            return Err(Error::DimensionMismatch("initial distribution length".into()));
        }
        let successors = (0..num_states * num_actions)
            .map(|sa| {
                let row = &transition[sa * num_states..(sa + 1) * num_states];
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(i, &p)| (i, p))
                    .collect()
            })
            .collect();
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            discount,
            initial_dist,
            horizon,
            absorbing: vec![false; num_states],
            successors,
        })
    }

    pub fn with_absorbing(mut self, states: &[usize]) -> Result<Self> {
        for &s in states {
            if s >= self.num_states {
                return Err(Error::DimensionMismatch(format!("absorbing state {s} out of range")));
            }
            self.absorbing[s] = true;
        }
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon.max(1);
        self
    }

    pub fn with_reward(mut self, reward: Vec<f64>) -> Result<Self> {
        if reward.len() != self.num_states * self.num_actions {
            return Err(Error::DimensionMismatch("reward table shape".into()));
        }
        self.reward = reward;
        Ok(self)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn discount(&self) -> f64 {
        self.discount
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }
    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }
    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing[s]
    }
    pub fn absorbing_states(&self) -> Vec<usize> {
        (0..self.num_states).filter(|&s| self.absorbing[s]).collect()
    }
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.num_actions + a) * self.num_states;
        &self.transition[i..i + self.num_states]
    }
    /// Nonzero `(next_state, probability)` pairs for `(s, a)`.
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.successors[s * self.num_actions + a]
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial_dist, rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let succ = self.successors(s, a);
        if succ.len() == 1 {
            return succ[0].0;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(n, p) in succ {
            acc += p;
            if u < acc {
                return n;
            }
        }
        succ.last().map(|&(n, _)| n).unwrap_or(s)
    }

    fn check_policy(&self, num_states: usize, num_actions: usize) -> Result<()> {
        if num_states != self.num_states || num_actions != self.num_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, mdp is {}x{}",
                num_states, num_actions, self.num_states, self.num_actions
            )));
        }
        Ok(())
    }
}

/// Lists every violated invariant; an empty list means the MDP is well formed.
pub fn validate_mdp(mdp: &TabularMdp) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = mdp.num_states;
    for s in 0..n {
        for a in 0..mdp.num_actions {
            let row = mdp.transition_row(s, a);
            if let Some(p) = row.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
                out.push(Violation {
                    field: "transition",
                    location: Some((s, a)),
                    message: format!("negative or non-finite entry {p}"),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                out.push(Violation {
                    field: "transition",
                    location: Some((s, a)),
                    message: format!("row sums to {sum}"),
                });
            }
            if !mdp.reward(s, a).is_finite() {
                out.push(Violation {
                    field: "reward",
                    location: Some((s, a)),
                    message: "non-finite reward".into(),
                });
            }
        }
    }
    let init_sum: f64 = mdp.initial_dist.iter().sum();
    if mdp.initial_dist.iter().any(|p| !(*p >= 0.0)) || (init_sum - 1.0).abs() > ROW_TOL {
        out.push(Violation {
            field: "initial_dist",
            location: None,
            message: format!("not a distribution (sum {init_sum})"),
        });
    }
    if !(mdp.discount >= 0.0 && mdp.discount < 1.0) {
        out.push(Violation {
            field: "discount",
            location: None,
            message: format!("{} is outside [0, 1)", mdp.discount),
        });
    }
    out
}

/// Time-indexed state marginals `d^t`, `t = 0..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyProfile {
    pub marginals: Vec<Vec<f64>>,
}

impl OccupancyProfile {
    pub fn steps(&self) -> usize {
        self.marginals.len().saturating_sub(1)
    }

    pub fn at(&self, t: usize) -> &[f64] {
        &self.marginals[t.min(self.marginals.len() - 1)]
    }
}

/// One forward step of the occupancy recursion under a row function.
pub(crate) fn push_forward<'a, F>(mdp: &TabularMdp, d: &[f64], mut row: F) -> Vec<f64>
where
    F: FnMut(usize) -> &'a [f64],
{
    let mut next = vec![0.0; mdp.num_states];
    for (s, &mass) in d.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        for (a, &pa) in row(s).iter().enumerate() {
            let w = mass * pa;
            if w == 0.0 {
                continue;
            }
            for &(n, p) in mdp.successors(s, a) {
                next[n] += w * p;
            }
        }
    }
    next
}

/// Exact state marginals under a stationary policy.
pub fn state_marginals(mdp: &TabularMdp, policy: &TabularPolicy, steps: usize) -> Result<OccupancyProfile> {
    mdp.check_policy(policy.num_states(), policy.num_actions())?;
    if steps > mdp.horizon {
        return Err(Error::param("steps", format!("{steps} exceeds horizon {}", mdp.horizon)));
    }
    let mut marginals = Vec::with_capacity(steps + 1);
    marginals.push(mdp.initial_dist.clone());
    for _ in 0..steps {
        let next = push_forward(mdp, marginals.last().unwrap(), |s| policy.row(s));
        marginals.push(next);
    }
    Ok(OccupancyProfile { marginals })
}

/// One decision step of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub time: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub observed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub steps: Vec<Step>,
    pub final_state: usize,
    pub success: bool,
}

impl EpisodeTrace {
    /// The observed subsequence of `(time, state, action)`.
    pub fn observed(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(|s| s.observed)
    }

    /// Steps available to the agent before acting at `t`.
    pub fn prefix(&self, t: usize) -> &[Step] {
        let end = self.steps.iter().position(|s| s.time >= t).unwrap_or(self.steps.len());
        &self.steps[..end]
    }
}

/// Samples one episode under `policy`. Observation flags are left unset;
/// monitored rollouts live in the harness.
pub fn rollout(mdp: &TabularMdp, policy: &TabularPolicy, seed: u64) -> Result<EpisodeTrace> {
    mdp.check_policy(policy.num_states(), policy.num_actions())?;
    let mut rng = seeded(seed);
    let mut s = mdp.sample_initial(&mut rng);
    let mut trace = EpisodeTrace::default();
    for t in 0..mdp.horizon {
        if mdp.is_absorbing(s) {
            break;
        }
        let a = sample_categorical(policy.row(s), &mut rng);
        let r = mdp.reward(s, a);
        trace.steps.push(Step {
            time: t,
            state: s,
            action: a,
            reward: r,
            observed: false,
        });
        s = mdp.sample_next(s, a, &mut rng);
    }
    trace.final_state = s;
    trace.success = mdp.is_absorbing(s);
    Ok(trace)
}

/// Σ_t γ^t r_t over the recorded steps.
pub fn discounted_return(trace: &EpisodeTrace, discount: f64) -> f64 {
    let mut g = 0.0;
    let mut w = 1.0;
    for st in &trace.steps {
        g += w * st.reward;
        w *= discount;
    }
    g
}

/// On-disk MDP record (row-major tables).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFile {
    pub schema_version: u32,
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub horizon: usize,
    pub initial_dist: Vec<f64>,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    #[serde(default)]
    pub absorbing: Vec<usize>,
}

impl MdpFile {
    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        MdpFile {
            schema_version: MDP_SCHEMA_VERSION,
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            discount: mdp.discount,
            horizon: mdp.horizon,
            initial_dist: mdp.initial_dist.clone(),
            transition: mdp.transition.clone(),
            reward: mdp.reward.clone(),
            absorbing: mdp.absorbing_states(),
        }
    }

    pub fn into_mdp(self) -> Result<TabularMdp> {
        if self.schema_version != MDP_SCHEMA_VERSION {
            return Err(Error::Serde(format!("unsupported mdp schema version {}", self.schema_version)));
        }
        TabularMdp::new(
            self.num_states,
            self.num_actions,
            self.transition,
            self.reward,
            self.discount,
            self.initial_dist,
            self.horizon,
        )?
        .with_absorbing(&self.absorbing)
    }
}
