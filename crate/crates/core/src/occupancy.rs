//! Exact occupancy of the joint (state, monitoring age) chain.
//!
//! When the agent's rows depend on its age since the last observation, the
//! state marginal `d^t` is no longer a function of a stationary per-state
//! policy. The renewal age evolves independently of the state, so pushing
//! forward the joint `(s, k)` distribution is exact when the age is known to
//! the agent (noiseless one-step tokens).

use crate::error::{Error, Result};
use crate::mdp::{OccupancyProfile, TabularMdp};
use crate::monitoring::HazardModel;
use crate::policy::{belief_bin, AugmentedPolicy, Conditioning};

/// Time-indexed joint marginals over `(state, age)`, stored `[t][s * ages + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOccupancy {
    pub num_states: usize,
    pub num_ages: usize,
    pub slices: Vec<Vec<f64>>,
}

impl JointOccupancy {
    pub fn prob(&self, t: usize, s: usize, k: usize) -> f64 {
        self.slices[t][s * self.num_ages + k]
    }

    pub fn state_marginals(&self) -> OccupancyProfile {
        let marginals = self
            .slices
            .iter()
            .map(|slice| slice.chunks(self.num_ages).map(|c| c.iter().sum()).collect())
            .collect();
        OccupancyProfile { marginals }
    }
}

/// Row used by an augmented policy when the age `k` is exactly known.
pub fn row_at_age<'a>(policy: &'a AugmentedPolicy, hazard: &HazardModel, s: usize, k: usize) -> &'a [f64] {
    let bucket = match policy.conditioning() {
        Conditioning::None => 0,
        Conditioning::Age { max_age } => k.min(max_age),
        Conditioning::BeliefBins { bins } => belief_bin(hazard.at(k), bins),
    };
    policy.row(s, bucket)
}

/// Pushes the joint chain forward for `steps` ticks starting from age 0.
pub fn joint_marginals(mdp: &TabularMdp, policy: &AugmentedPolicy, hazard: &HazardModel, steps: usize) -> Result<JointOccupancy> {
    if policy.num_states() != mdp.num_states() || policy.num_actions() != mdp.num_actions() {
        return Err(Error::DimensionMismatch("policy and mdp disagree on shape".into()));
    }
    joint_marginals_with(mdp, hazard, steps, |_, s, k| row_at_age(policy, hazard, s, k))
}

/// As [`joint_marginals`], with the row at `(t, s, k)` supplied by `row`.
pub fn joint_marginals_with<'a, F>(mdp: &TabularMdp, hazard: &HazardModel, steps: usize, row: F) -> Result<JointOccupancy>
where
    F: Fn(usize, usize, usize) -> &'a [f64],
{
    let n = mdp.num_states();
    let ages = hazard.upper() + 1;
    let mut first = vec![0.0; n * ages];
    for (s, &p) in mdp.initial_dist().iter().enumerate() {
        first[s * ages] = p;
    }
    let mut slices = Vec::with_capacity(steps + 1);
    slices.push(first);
    for t in 0..steps {
        let cur = slices.last().unwrap();
        let mut next = vec![0.0; n * ages];
        for s in 0..n {
            for k in 0..ages {
                let mass = cur[s * ages + k];
                if mass == 0.0 {
                    continue;
                }
                let h = hazard.at(k);
                let stay_k = if k + 1 < ages { k + 1 } else { k };
                for (a, &pa) in row(t, s, k).iter().enumerate() {
                    let w = mass * pa;
                    if w == 0.0 {
                        continue;
                    }
                    for &(s2, p) in mdp.successors(s, a) {
                        let m = w * p;
                        if h > 0.0 {
                            next[s2 * ages + 1.min(ages - 1)] += m * h;
                        }
                        if h < 1.0 {
                            next[s2 * ages + stay_k] += m * (1.0 - h);
                        }
                    }
                }
            }
        }
        slices.push(next);
    }
    Ok(JointOccupancy {
        num_states: n,
        num_ages: ages,
        slices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::state_marginals;
    use crate::mdp::test_util::{random_mdp, random_policy};
    use crate::monitoring::uniform_hazard;
    use approx::assert_abs_diff_eq;

    #[test]
    fn unconditioned_policy_matches_plain_marginals() {
        let mdp = random_mdp(3, 4, 3, 6);
        let pol = random_policy(4, 4, 3);
        let joint = joint_marginals(&mdp, &AugmentedPolicy::from(&pol), &uniform_hazard(2, 4).unwrap(), 6).unwrap();
        let plain = state_marginals(&mdp, &pol, 6).unwrap();
        for t in 0..=6 {
            for s in 0..4 {
                assert_abs_diff_eq!(joint.state_marginals().marginals[t][s], plain.marginals[t][s], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn age_marginal_follows_renewal_prediction() {
        let mdp = random_mdp(5, 3, 2, 8);
        let pol = random_policy(6, 3, 2);
        let hz = uniform_hazard(2, 5).unwrap();
        let joint = joint_marginals(&mdp, &AugmentedPolicy::from(&pol), &hz, 8).unwrap();
        let mut belief = crate::monitoring::AgeBelief::point(0, 5);
        for t in 0..=8 {
            for k in 0..6 {
                let pk: f64 = (0..3).map(|s| joint.prob(t, s, k)).sum();
                assert_abs_diff_eq!(pk, belief.alpha[k], epsilon = 1e-12);
            }
            belief = crate::monitoring::belief_predict(&belief, &hz).unwrap();
        }
    }
}
