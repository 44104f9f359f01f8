//! Tabular policies: plain per-state rows and rows conditioned on a
//! monitoring summary (exact age or a binned observation probability).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POLICY_SCHEMA_VERSION: u32 = 1;

const ROW_TOL: f64 = 1e-9;

fn check_row(row: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::InvalidDistribution(format!("{what}: entry {p} is negative or non-finite")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidDistribution(format!("{what}: sums to {sum}")));
    }
    Ok(())
}

/// Per-state action distributions, stored row-major `[state][action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
    support_floor: Option<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::DimensionMismatch("policy needs at least one state and action".into()));
        }
        if probs.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy table has {} entries, expected {}x{}",
                probs.len(),
                num_states,
                num_actions
            )));
        }
        for s in 0..num_states {
            check_row(&probs[s * num_actions..(s + 1) * num_actions], &format!("policy row {s}"))?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
            support_floor: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_actions = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(Error::DimensionMismatch("ragged policy rows".into()));
        }
        Self::new(rows.len(), num_actions, rows.concat())
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Self {
            num_states,
            num_actions,
            probs: vec![p; num_states * num_actions],
            support_floor: Some(p),
        }
    }

    /// Deterministic policy choosing `actions[s]` in every state.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::DimensionMismatch(format!("action {a} out of range in state {s}")));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Self::new(actions.len(), num_actions, probs)
    }

    /// Marks the policy as full-support after checking every entry is at least `floor`.
    pub fn with_full_support(mut self, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::param("support_floor", "must be positive"));
        }
        if let Some((i, p)) = self.probs.iter().enumerate().find(|(_, &p)| p < floor - 1e-15) {
            return Err(Error::InvalidDistribution(format!(
                "entry {} of state {} is {p}, below support floor {floor}",
                i % self.num_actions,
                i / self.num_actions
            )));
        }
        self.support_floor = Some(floor);
        Ok(self)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn support_floor(&self) -> Option<f64> {
        self.support_floor
    }

    pub fn is_full_support(&self) -> bool {
        self.support_floor.is_some()
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn table(&self) -> &[f64] {
        &self.probs
    }

    /// Highest-probability action, lowest index on ties.
    pub fn argmax(&self, s: usize) -> usize {
        argmax_row(self.row(s))
    }

    /// The `k` most probable actions at `s` (ties broken by lower index).
    pub fn top_k(&self, s: usize, k: usize) -> Vec<usize> {
        top_k_row(self.row(s), k)
    }
}

pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

pub fn top_k_row(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx
}

/// KL divergence between two action rows in nats, with 0·ln(0/q) = 0.
/// Returns the offending action index when `q` has a zero where `p` does not.
pub fn kl_rows(p: &[f64], q: &[f64]) -> std::result::Result<f64, usize> {
    let mut kl = 0.0;
    for (a, (&pa, &qa)) in p.iter().zip(q).enumerate() {
        if pa <= 0.0 {
            continue;
        }
        if qa <= 0.0 {
            return Err(a);
        }
        kl += pa * (pa / qa).ln();
    }
    Ok(kl.max(0.0))
}

/// Δ(s): KL from the agent's action row to the reference row at `state`.
pub fn action_divergence(pi: &TabularPolicy, pi_ref: &TabularPolicy, state: usize) -> Result<f64> {
    if pi.num_actions != pi_ref.num_actions || state >= pi.num_states || state >= pi_ref.num_states {
        return Err(Error::DimensionMismatch("policies disagree on shape or state out of range".into()));
    }
    kl_rows(pi.row(state), pi_ref.row(state)).map_err(|action| Error::AbsoluteContinuity { state, action })
}

/// What a conditioned policy keys its rows on besides the MDP state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Conditioning {
    /// Rows depend on the state only.
    None,
    /// Rows indexed by the exact age since the last observation, `0..=max_age`.
    Age { max_age: usize },
    /// Rows indexed by equal-width bins of the observation probability.
    BeliefBins { bins: usize },
}

impl Conditioning {
    pub fn num_buckets(&self) -> usize {
        match *self {
            Conditioning::None => 1,
            Conditioning::Age { max_age } => max_age + 1,
            Conditioning::BeliefBins { bins } => bins,
        }
    }

    /// Bucket for the current monitoring summary. `age` is only consulted
    /// for age conditioning and must be the exact age.
    pub fn bucket(&self, age: Option<usize>, b_hat: f64) -> usize {
        match *self {
            Conditioning::None => 0,
            Conditioning::Age { max_age } => age.unwrap_or_else(|| panic!("age conditioning needs an exact age")).min(max_age),
            Conditioning::BeliefBins { bins } => belief_bin(b_hat, bins),
        }
    }
}

pub fn belief_bin(b_hat: f64, bins: usize) -> usize {
    ((b_hat.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Rows keyed by `(state, bucket)`, stored `[state][bucket][action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPolicy {
    num_states: usize,
    num_actions: usize,
    conditioning: Conditioning,
    probs: Vec<f64>,
}

impl AugmentedPolicy {
    pub fn new(num_states: usize, num_actions: usize, conditioning: Conditioning, probs: Vec<f64>) -> Result<Self> {
        let nb = conditioning.num_buckets();
        if nb == 0 || num_states == 0 || num_actions == 0 {
            return Err(Error::DimensionMismatch("empty augmented policy".into()));
        }
        if probs.len() != num_states * nb * num_actions {
            return Err(Error::DimensionMismatch(format!(
                "augmented policy has {} entries, expected {}",
                probs.len(),
                num_states * nb * num_actions
            )));
        }
        for i in 0..num_states * nb {
            check_row(&probs[i * num_actions..(i + 1) * num_actions], &format!("augmented row {i}"))?;
        }
        Ok(Self {
            num_states,
            num_actions,
            conditioning,
            probs,
        })
    }

    /// Builds rows by evaluating `f(state, bucket)`.
    pub fn from_fn<F>(num_states: usize, num_actions: usize, conditioning: Conditioning, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let nb = conditioning.num_buckets();
        let mut probs = Vec::with_capacity(num_states * nb * num_actions);
        for s in 0..num_states {
            for b in 0..nb {
                let row = f(s, b);
                if row.len() != num_actions {
                    return Err(Error::DimensionMismatch("row builder returned wrong length".into()));
                }
                probs.extend(row);
            }
        }
        Self::new(num_states, num_actions, conditioning, probs)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_buckets(&self) -> usize {
        self.conditioning.num_buckets()
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn row(&self, s: usize, bucket: usize) -> &[f64] {
        let nb = self.num_buckets();
        let i = (s * nb + bucket) * self.num_actions;
        &self.probs[i..i + self.num_actions]
    }

    pub fn table(&self) -> &[f64] {
        &self.probs
    }

    /// Collapses to a plain policy; only valid without conditioning.
    pub fn as_tabular(&self) -> Option<TabularPolicy> {
        match self.conditioning {
            Conditioning::None => TabularPolicy::new(self.num_states, self.num_actions, self.probs.clone()).ok(),
            _ => None,
        }
    }

    /// Row-wise convex combination `w·self + (1−w)·other`.
    pub fn mix(&self, other: &AugmentedPolicy, w: f64) -> Result<AugmentedPolicy> {
        if self.num_states != other.num_states
            || self.num_actions != other.num_actions
            || self.conditioning != other.conditioning
        {
            return Err(Error::DimensionMismatch("cannot mix policies of different shape".into()));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| w * a + (1.0 - w) * b)
            .collect();
        AugmentedPolicy::new(self.num_states, self.num_actions, self.conditioning, probs)
    }
}

impl From<&TabularPolicy> for AugmentedPolicy {
    fn from(p: &TabularPolicy) -> Self {
        AugmentedPolicy {
            num_states: p.num_states,
            num_actions: p.num_actions,
            conditioning: Conditioning::None,
            probs: p.probs.clone(),
        }
    }
}

/// On-disk policy record. Plain policies are stored with `conditioning = none`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    pub schema_version: u32,
    pub num_states: usize,
    pub num_actions: usize,
    pub conditioning: Conditioning,
    pub probs: Vec<f64>,
}

impl PolicyFile {
    pub fn from_policy(p: &AugmentedPolicy) -> Self {
        PolicyFile {
            schema_version: POLICY_SCHEMA_VERSION,
            num_states: p.num_states,
            num_actions: p.num_actions,
            conditioning: p.conditioning,
            probs: p.probs.clone(),
        }
    }

    pub fn into_policy(self) -> Result<AugmentedPolicy> {
        if self.schema_version != POLICY_SCHEMA_VERSION {
            return Err(Error::Serde(format!("unsupported policy schema version {}", self.schema_version)));
        }
        AugmentedPolicy::new(self.num_states, self.num_actions, self.conditioning, self.probs)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
