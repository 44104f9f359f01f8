//! Acting rules: what row an agent executes given its state and its
//! monitoring summary (exact age when known, otherwise only `b̂`).

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monitoring::HazardModel;
use crate::policy::{argmax_row, top_k_row, AugmentedPolicy, Conditioning, TabularPolicy};

#[derive(Debug, Clone, PartialEq)]
pub enum ActingRule {
    /// Executes a (possibly age- or belief-conditioned) policy.
    Policy(AugmentedPolicy),
    /// Executes the reference whenever `b̂ ≥ threshold`, the task policy otherwise.
    HazardSwitch {
        task: AugmentedPolicy,
        reference: TabularPolicy,
        threshold: f64,
    },
    /// When `b̂ ≥ threshold`, task actions outside the reference's top-k are
    /// replaced by the reference's most probable action.
    Shielded {
        task: AugmentedPolicy,
        reference: TabularPolicy,
        threshold: f64,
        k: usize,
    },
}

/// Serializable tag used in tables and logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Policy,
    HazardSwitch,
    Shielded,
}

impl From<TabularPolicy> for ActingRule {
    fn from(p: TabularPolicy) -> Self {
        ActingRule::Policy(AugmentedPolicy::from(&p))
    }
}

impl From<AugmentedPolicy> for ActingRule {
    fn from(p: AugmentedPolicy) -> Self {
        ActingRule::Policy(p)
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::param("threshold", format!("{threshold} is outside [0, 1]")));
    }
    Ok(())
}

fn same_shape(task: &AugmentedPolicy, reference: &TabularPolicy) -> Result<()> {
    if task.num_states() != reference.num_states() || task.num_actions() != reference.num_actions() {
        return Err(Error::DimensionMismatch("task and reference policies disagree on shape".into()));
    }
    Ok(())
}

impl ActingRule {
    pub fn hazard_switch(task: AugmentedPolicy, reference: TabularPolicy, threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        same_shape(&task, &reference)?;
        Ok(ActingRule::HazardSwitch {
            task,
            reference,
            threshold,
        })
    }

    pub fn shielded(task: AugmentedPolicy, reference: TabularPolicy, threshold: f64, k: usize) -> Result<Self> {
        check_threshold(threshold)?;
        same_shape(&task, &reference)?;
        if k == 0 || k > reference.num_actions() {
            return Err(Error::param("k", format!("{k} is outside 1..={}", reference.num_actions())));
        }
        Ok(ActingRule::Shielded {
            task,
            reference,
            threshold,
            k,
        })
    }

    pub fn kind(&self) -> RuleKind {
        match self {
            ActingRule::Policy(_) => RuleKind::Policy,
            ActingRule::HazardSwitch { .. } => RuleKind::HazardSwitch,
            ActingRule::Shielded { .. } => RuleKind::Shielded,
        }
    }

    fn task(&self) -> &AugmentedPolicy {
        match self {
            ActingRule::Policy(p) => p,
            ActingRule::HazardSwitch { task, .. } | ActingRule::Shielded { task, .. } => task,
        }
    }

    pub fn num_states(&self) -> usize {
        self.task().num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.task().num_actions()
    }

    /// Whether the executed row can depend on the monitoring summary.
    pub fn is_stationary(&self) -> bool {
        matches!(self, ActingRule::Policy(p) if p.conditioning() == Conditioning::None)
    }

    /// Whether choosing a row requires the exact age.
    pub fn needs_age(&self) -> bool {
        matches!(self.task().conditioning(), Conditioning::Age { .. })
    }

    /// The stationary policy, if the rule ignores monitoring.
    pub fn as_tabular(&self) -> Option<TabularPolicy> {
        match self {
            ActingRule::Policy(p) => p.as_tabular(),
            _ => None,
        }
    }

    /// Executed action distribution at state `s`.
    ///
    /// Panics if the task policy is age-conditioned and `age` is `None`.
    pub fn row(&self, s: usize, age: Option<usize>, b_hat: f64) -> Cow<'_, [f64]> {
        let task = self.task();
        let task_row = task.row(s, task.conditioning().bucket(age, b_hat));
        match self {
            ActingRule::Policy(_) => Cow::Borrowed(task_row),
            ActingRule::HazardSwitch {
                reference, threshold, ..
            } => {
                if b_hat >= *threshold {
                    Cow::Borrowed(reference.row(s))
                } else {
                    Cow::Borrowed(task_row)
                }
            }
            ActingRule::Shielded {
                reference,
                threshold,
                k,
                ..
            } => {
                if b_hat < *threshold {
                    return Cow::Borrowed(task_row);
                }
                let ref_row = reference.row(s);
                let allowed = top_k_row(ref_row, *k);
                let best = argmax_row(ref_row);
                let mut out = vec![0.0; task_row.len()];
                for (a, &p) in task_row.iter().enumerate() {
                    if allowed.contains(&a) {
                        out[a] += p;
                    } else {
                        out[best] += p;
                    }
                }
                Cow::Owned(out)
            }
        }
    }

    /// Tabulates the rule by exact age, with `b̂ = h(k)`. Exact whenever the
    /// agent knows its age.
    pub fn tabulate_by_age(&self, hazard: &HazardModel) -> Result<AugmentedPolicy> {
        let u = hazard.upper();
        AugmentedPolicy::from_fn(self.num_states(), self.num_actions(), Conditioning::Age { max_age: u }, |s, k| {
            self.row(s, Some(k), hazard.at(k)).into_owned()
        })
    }
}
