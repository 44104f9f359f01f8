//! Evidence quantities: state log-ratios, per-observation log-likelihood
//! ratios, the per-step observation-weighted signal ψ and exposure
//! accounting.
//!
//! ψ_t = b̂_t · (log r_t(s_t) + Δ(s_t)), where `log r_t` compares the agent's
//! time-t state marginal to the reference's and Δ is the action KL of the
//! row the agent actually executes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acting::ActingRule;
use crate::error::{Error, Result};
use crate::mdp::{state_marginals, EpisodeTrace, OccupancyProfile, Step, TabularMdp};
use crate::monitoring::{AgeFilter, HazardModel, MonitorState, TokenChannel};
use crate::occupancy::{joint_marginals, row_at_age, JointOccupancy};
use crate::policy::{kl_rows, top_k_row, AugmentedPolicy, TabularPolicy};
use crate::rng::{derive_seed, sample_categorical, seeded};

pub const DEFAULT_RATIO_FLOOR: f64 = 1e-12;

/// `ln d_π^t(s) − ln d_ref^t(s)` with masking where the reference mass is
/// below `floor` and clipping where the agent's mass is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRatioTable {
    floor: f64,
    num_states: usize,
    log_ratio: Vec<Vec<f64>>,
    valid: Vec<Vec<bool>>,
    clipped: Vec<Vec<bool>>,
}

impl StateRatioTable {
    pub fn from_profiles(agent: &OccupancyProfile, reference: &OccupancyProfile, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::param("floor", "must be positive"));
        }
        if agent.marginals.len() != reference.marginals.len() {
            return Err(Error::DimensionMismatch("occupancy profiles cover different horizons".into()));
        }
        let num_states = agent.marginals.first().map(|m| m.len()).unwrap_or(0);
        let mut log_ratio = Vec::with_capacity(agent.marginals.len());
        let mut valid = Vec::with_capacity(agent.marginals.len());
        let mut clipped = Vec::with_capacity(agent.marginals.len());
        for (da, dr) in agent.marginals.iter().zip(&reference.marginals) {
            if da.len() != num_states || dr.len() != num_states {
                return Err(Error::DimensionMismatch("occupancy slice width".into()));
            }
            let mut lr = vec![0.0; num_states];
            let mut v = vec![true; num_states];
            let mut c = vec![false; num_states];
            for s in 0..num_states {
                let (p, q) = (da[s], dr[s]);
                if q < floor {
                    v[s] = false;
                    lr[s] = p.max(floor).ln() - floor.ln();
                } else if p <= 0.0 {
                    c[s] = true;
                    lr[s] = floor.ln() - q.ln();
                } else {
                    lr[s] = p.ln() - q.ln();
                }
            }
            log_ratio.push(lr);
            valid.push(v);
            clipped.push(c);
        }
        Ok(Self {
            floor,
            num_states,
            log_ratio,
            valid,
            clipped,
        })
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn steps(&self) -> usize {
        self.log_ratio.len().saturating_sub(1)
    }

    fn t(&self, t: usize) -> usize {
        t.min(self.log_ratio.len() - 1)
    }

    /// Log-ratio at `(t, s)`. Masked entries carry `ln max(d_π, floor) − ln floor`.
    pub fn log_ratio(&self, t: usize, s: usize) -> f64 {
        self.log_ratio[self.t(t)][s]
    }
    pub fn is_valid(&self, t: usize, s: usize) -> bool {
        self.valid[self.t(t)][s]
    }
    pub fn is_clipped(&self, t: usize, s: usize) -> bool {
        self.clipped[self.t(t)][s]
    }
    pub fn slice(&self, t: usize) -> &[f64] {
        &self.log_ratio[self.t(t)]
    }
}

/// Ratio table from the exact marginals of two stationary policies.
pub fn build_state_ratio(mdp: &TabularMdp, pi: &TabularPolicy, pi_ref: &TabularPolicy, floor: f64) -> Result<StateRatioTable> {
    let h = mdp.horizon();
    let agent = state_marginals(mdp, pi, h)?;
    let reference = state_marginals(mdp, pi_ref, h)?;
    StateRatioTable::from_profiles(&agent, &reference, floor)
}

/// One per-step evidence record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub time: usize,
    pub b_hat: f64,
    pub log_ratio: f64,
    pub delta: f64,
    pub psi: f64,
}

impl EvidenceRecord {
    pub fn at(mut self, time: usize) -> Self {
        self.time = time;
        self
    }
}

/// ψ = b̂·(log r + Δ). Negative whenever `log_ratio < −delta`.
pub fn tom_scalar(b_hat: f64, log_ratio: f64, delta: f64) -> EvidenceRecord {
    EvidenceRecord {
        time: 0,
        b_hat,
        log_ratio,
        delta,
        psi: b_hat * (log_ratio + delta),
    }
}

/// LLR of an observed `(s, a)` at time `t` from explicit rows.
pub fn llr_from_rows(pi_row: &[f64], ref_row: &[f64], ratio: &StateRatioTable, t: usize, s: usize, a: usize) -> Result<f64> {
    if !ratio.is_valid(t, s) {
        return Err(Error::MaskedState { time: t, state: s });
    }
    if ref_row[a] <= 0.0 {
        return Err(Error::AbsoluteContinuity { state: s, action: a });
    }
    Ok(ratio.log_ratio(t, s) + (pi_row[a] / ref_row[a]).ln())
}

/// Per-step observed log-likelihood ratio: state term plus action term.
pub fn observed_llr(
    pi: &TabularPolicy,
    pi_ref: &TabularPolicy,
    ratio: &StateRatioTable,
    t: usize,
    s: usize,
    a: usize,
) -> Result<f64> {
    llr_from_rows(pi.row(s), pi_ref.row(s), ratio, t, s, a)
}

/// Running exposure accounting for one learner or evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureLedger {
    discount: f64,
    decay: f64,
    discounted_sum: f64,
    weight: f64,
    step_ema: Option<f64>,
    episode_ema: Option<f64>,
    pub records: Vec<EvidenceRecord>,
    keep_records: bool,
}

impl ExposureLedger {
    pub fn new(discount: f64, decay: f64) -> Self {
        Self {
            discount,
            decay,
            discounted_sum: 0.0,
            weight: 1.0,
            step_ema: None,
            episode_ema: None,
            records: Vec::new(),
            keep_records: false,
        }
    }

    pub fn keeping_records(mut self) -> Self {
        self.keep_records = true;
        self
    }

    fn blend(ema: Option<f64>, decay: f64, x: f64) -> f64 {
        match ema {
            None => x,
            Some(m) => decay * m + (1.0 - decay) * x,
        }
    }

    pub fn push(&mut self, rec: EvidenceRecord) {
        self.discounted_sum += self.weight * rec.psi;
        self.weight *= self.discount;
        self.step_ema = Some(Self::blend(self.step_ema, self.decay, rec.psi));
        if self.keep_records {
            self.records.push(rec);
        }
    }

    /// Closes the episode: folds its discounted exposure into the episode EMA
    /// and returns it.
    pub fn finish_episode(&mut self) -> f64 {
        let total = self.discounted_sum;
        self.episode_ema = Some(Self::blend(self.episode_ema, self.decay, total));
        self.discounted_sum = 0.0;
        self.weight = 1.0;
        total
    }

    pub fn discounted_sum(&self) -> f64 {
        self.discounted_sum
    }
    pub fn step_ema(&self) -> Option<f64> {
        self.step_ema
    }
    pub fn episode_ema(&self) -> Option<f64> {
        self.episode_ema
    }
}

/// Everything needed to score an agent's steps: its acting rule, the
/// reference rows, and the ratio table of its occupancy against the
/// reference's.
#[derive(Debug, Clone)]
pub struct EvidenceModel<'a> {
    pub mdp: &'a TabularMdp,
    pub rule: &'a ActingRule,
    pub pi_ref: &'a TabularPolicy,
    pub hazard: &'a HazardModel,
    pub channel: TokenChannel,
    pub ratio: StateRatioTable,
}

/// Episodes used to estimate occupancy when it cannot be computed exactly.
pub const MONTE_CARLO_OCCUPANCY_EPISODES: usize = 20_000;

impl<'a> EvidenceModel<'a> {
    pub fn new(
        mdp: &'a TabularMdp,
        rule: &'a ActingRule,
        pi_ref: &'a TabularPolicy,
        hazard: &'a HazardModel,
        channel: TokenChannel,
        floor: f64,
    ) -> Result<Self> {
        let ratio = ratio_for_rule(mdp, rule, pi_ref, hazard, &channel, floor, MONTE_CARLO_OCCUPANCY_EPISODES, 0)?;
        Ok(Self::with_ratio(mdp, rule, pi_ref, hazard, channel, ratio))
    }

    pub fn with_ratio(
        mdp: &'a TabularMdp,
        rule: &'a ActingRule,
        pi_ref: &'a TabularPolicy,
        hazard: &'a HazardModel,
        channel: TokenChannel,
        ratio: StateRatioTable,
    ) -> Self {
        Self {
            mdp,
            rule,
            pi_ref,
            hazard,
            channel,
            ratio,
        }
    }
}

/// Agent occupancy for the ratio table: exact when the rule is stationary or
/// the channel reveals the age, Monte Carlo over `samples` episodes otherwise.
pub fn agent_occupancy(
    mdp: &TabularMdp,
    rule: &ActingRule,
    hazard: &HazardModel,
    channel: &TokenChannel,
    samples: usize,
    seed: u64,
) -> Result<OccupancyProfile> {
    let h = mdp.horizon();
    if let Some(p) = rule.as_tabular() {
        return state_marginals(mdp, &p, h);
    }
    if channel.reveals_age() {
        let tab = rule.tabulate_by_age(hazard)?;
        return joint_marginals(mdp, &tab, hazard, h).map(|j| j.state_marginals());
    }
    if rule.needs_age() {
        return Err(Error::Config(
            "age-conditioned rows need a channel that reveals the age (noiseless, delay 1)".into(),
        ));
    }
    if samples == 0 {
        return Err(Error::param("samples", "must be positive"));
    }
    let n = mdp.num_states();
    let mut counts = vec![vec![0.0; n]; h + 1];
    for i in 0..samples {
        let mut rng = seeded(derive_seed(seed, i as u64));
        let mut s = mdp.sample_initial(&mut rng);
        let mut monitor = MonitorState::new();
        let mut filter = AgeFilter::new(hazard.clone(), *channel);
        counts[0][s] += 1.0;
        for t in 0..h {
            if !mdp.is_absorbing(s) {
                let (_, due) = monitor.tick(hazard, channel, &mut rng);
                for tok in due {
                    filter.apply_token(Some(tok.value))?;
                }
                let a = sample_categorical(&rule.row(s, None, filter.observation_probability()), &mut rng);
                s = mdp.sample_next(s, a, &mut rng);
                filter.predict();
            }
            counts[t + 1][s] += 1.0;
        }
    }
    let marginals = counts
        .into_iter()
        .map(|c| c.into_iter().map(|x| x / samples as f64).collect())
        .collect();
    Ok(OccupancyProfile { marginals })
}

pub fn reference_occupancy(mdp: &TabularMdp, pi_ref: &TabularPolicy) -> Result<OccupancyProfile> {
    state_marginals(mdp, pi_ref, mdp.horizon())
}

#[allow(clippy::too_many_arguments)]
pub fn ratio_for_rule(
    mdp: &TabularMdp,
    rule: &ActingRule,
    pi_ref: &TabularPolicy,
    hazard: &HazardModel,
    channel: &TokenChannel,
    floor: f64,
    samples: usize,
    seed: u64,
) -> Result<StateRatioTable> {
    let agent = agent_occupancy(mdp, rule, hazard, channel, samples, seed)?;
    let reference = reference_occupancy(mdp, pi_ref)?;
    StateRatioTable::from_profiles(&agent, &reference, floor)
}

/// A monitored step: what the agent computed and what the supervisor saw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredStep {
    pub step: Step,
    pub record: EvidenceRecord,
    /// Observed log-likelihood ratio (zero when unobserved).
    pub llr: f64,
    /// The observed state was masked in the ratio table.
    pub clipped: bool,
    /// Ticks since the supervisor's previous observation.
    pub age: usize,
    /// The executed action is among the reference's top-k (k fixed by the caller).
    pub in_top_k: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonitoredEpisode {
    pub trace: EpisodeTrace,
    pub steps: Vec<ScoredStep>,
}

impl MonitoredEpisode {
    pub fn discounted_exposure(&self, discount: f64) -> f64 {
        let mut w = 1.0;
        let mut total = 0.0;
        for st in &self.steps {
            total += w * st.record.psi;
            w *= discount;
        }
        total
    }

    /// Σ of observed log-likelihood ratios.
    pub fn realized(&self) -> f64 {
        self.steps.iter().map(|s| s.llr).sum()
    }
}

/// Default `k` for top-k compliance.
pub const DEFAULT_TOP_K: usize = 3;

/// Runs one episode of agent, monitor and exact filter under the model's rule.
pub fn run_monitored_episode<R: Rng + ?Sized>(model: &EvidenceModel<'_>, top_k: usize, rng: &mut R) -> Result<MonitoredEpisode> {
    run_scored_episode(model, model.rule, top_k, rng)
}

/// Runs `executor` while scoring observed steps with the model's rule and
/// ratio table, i.e. what a supervisor testing for the model's agent would
/// compute. ψ records use the executor's rows.
pub fn run_scored_episode<R: Rng + ?Sized>(
    model: &EvidenceModel<'_>,
    executor: &ActingRule,
    top_k: usize,
    rng: &mut R,
) -> Result<MonitoredEpisode> {
    let mdp = model.mdp;
    let needs_age = executor.needs_age() || model.rule.needs_age();
    let mut monitor = MonitorState::new();
    let mut filter = AgeFilter::new(model.hazard.clone(), model.channel);
    let mut s = mdp.sample_initial(rng);
    let mut ep = MonitoredEpisode::default();
    for t in 0..mdp.horizon() {
        if mdp.is_absorbing(s) {
            break;
        }
        let age = monitor.age;
        let (observed, due) = monitor.tick(model.hazard, &model.channel, rng);
        for tok in due {
            filter.apply_token(Some(tok.value))?;
        }
        let b_hat = filter.observation_probability();
        let known_age = if needs_age {
            Some(filter.exact_age().ok_or_else(|| {
                Error::Config("age-conditioned rows need a channel that reveals the age".into())
            })?)
        } else {
            filter.exact_age()
        };
        let row = executor.row(s, known_age, b_hat);
        let ref_row = model.pi_ref.row(s);
        let a = sample_categorical(&row, rng);
        let delta = kl_rows(&row, ref_row).map_err(|action| Error::AbsoluteContinuity { state: s, action })?;
        let lr = model.ratio.log_ratio(t, s);
        let record = tom_scalar(b_hat, lr, delta).at(t);
        let (llr, clipped) = if observed {
            let scoring_row = model.rule.row(s, known_age, b_hat);
            if ref_row[a] <= 0.0 {
                return Err(Error::AbsoluteContinuity { state: s, action: a });
            }
            (lr + (scoring_row[a] / ref_row[a]).ln(), !model.ratio.is_valid(t, s))
        } else {
            (0.0, false)
        };
        let step = Step {
            time: t,
            state: s,
            action: a,
            reward: mdp.reward(s, a),
            observed,
        };
        ep.trace.steps.push(step);
        ep.steps.push(ScoredStep {
            step,
            record,
            llr,
            clipped,
            age,
            in_top_k: top_k_row(ref_row, top_k).contains(&a),
        });
        s = mdp.sample_next(s, a, rng);
        filter.predict();
    }
    ep.trace.final_state = s;
    ep.trace.success = mdp.is_absorbing(s);
    Ok(ep)
}

/// Monte Carlo estimate of `E[Σ_t γ^t ψ_t]` with its standard error.
pub fn expected_exposure(model: &EvidenceModel<'_>, discount: f64, num_episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if num_episodes == 0 {
        return Err(Error::param("num_episodes", "must be positive"));
    }
    let mut values = Vec::with_capacity(num_episodes);
    for i in 0..num_episodes {
        let mut rng = seeded(derive_seed(seed, i as u64));
        let ep = run_monitored_episode(model, DEFAULT_TOP_K, &mut rng)?;
        values.push(ep.discounted_exposure(discount));
    }
    Ok(mean_and_se(&values))
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Realized evidence over the observed steps of a trace under plain policies.
/// Returns the sum and whether any observed state was masked.
pub fn realized_evidence(
    trace: &EpisodeTrace,
    pi: &TabularPolicy,
    pi_ref: &TabularPolicy,
    ratio: &StateRatioTable,
) -> Result<(f64, bool)> {
    let mut total = 0.0;
    let mut clipped = false;
    for st in trace.observed() {
        match observed_llr(pi, pi_ref, ratio, st.time, st.state, st.action) {
            Ok(v) => total += v,
            Err(Error::MaskedState { .. }) => {
                clipped = true;
                total += ratio.log_ratio(st.time, st.state) + (pi.prob(st.state, st.action) / pi_ref.prob(st.state, st.action)).ln();
            }
            Err(e) => return Err(e),
        }
    }
    Ok((total, clipped))
}

/// Exact `E[Σ_t γ^t ψ_t]` through the joint chain. Only valid when the agent
/// knows its age (noiseless one-step tokens), so that `b̂_t = h(K_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactExposure {
    pub total: f64,
    /// Undiscounted expected ψ per time step.
    pub per_step: Vec<f64>,
    /// Expected discounted ψ split into state and action parts.
    pub state_part: f64,
    pub action_part: f64,
    /// Exact discounted private return over the same horizon.
    pub discounted_return: f64,
    /// Probability of having reached an absorbing state by the horizon.
    pub success: f64,
}

pub fn exact_exposure(
    mdp: &TabularMdp,
    rule: &ActingRule,
    pi_ref: &TabularPolicy,
    hazard: &HazardModel,
    floor: f64,
    discount: f64,
) -> Result<ExactExposure> {
    let policy = rule.tabulate_by_age(hazard)?;
    let h = mdp.horizon();
    let joint = joint_marginals(mdp, &policy, hazard, h)?;
    let agent = match rule.as_tabular() {
        Some(p) => state_marginals(mdp, &p, h)?,
        None => joint.state_marginals(),
    };
    let ratio = StateRatioTable::from_profiles(&agent, &reference_occupancy(mdp, pi_ref)?, floor)?;
    exact_exposure_with(mdp, &policy, pi_ref, hazard, &joint, &ratio, discount)
}

pub fn exact_exposure_with(
    mdp: &TabularMdp,
    policy: &AugmentedPolicy,
    pi_ref: &TabularPolicy,
    hazard: &HazardModel,
    joint: &JointOccupancy,
    ratio: &StateRatioTable,
    discount: f64,
) -> Result<ExactExposure> {
    let ages = joint.num_ages;
    let mut per_step = Vec::with_capacity(mdp.horizon());
    let (mut total, mut sp, mut ap, mut ret) = (0.0, 0.0, 0.0, 0.0);
    let mut w = 1.0;
    for t in 0..mdp.horizon() {
        let mut step_state = 0.0;
        let mut step_action = 0.0;
        let mut step_reward = 0.0;
        for s in 0..mdp.num_states() {
            if mdp.is_absorbing(s) {
                continue;
            }
            let lr = ratio.log_ratio(t, s);
            for k in 0..ages {
                let m = joint.prob(t, s, k);
                if m == 0.0 {
                    continue;
                }
                let row = row_at_age(policy, hazard, s, k);
                step_reward += m * row.iter().enumerate().map(|(a, p)| p * mdp.reward(s, a)).sum::<f64>();
                let hk = hazard.at(k);
                if hk == 0.0 {
                    continue;
                }
                let delta = kl_rows(row, pi_ref.row(s)).map_err(|action| Error::AbsoluteContinuity { state: s, action })?;
                step_state += m * hk * lr;
                step_action += m * hk * delta;
            }
        }
        per_step.push(step_state + step_action);
        total += w * (step_state + step_action);
        sp += w * step_state;
        ap += w * step_action;
        ret += w * step_reward;
        w *= discount;
    }
    let last = &joint.slices[mdp.horizon()];
    let success = (0..mdp.num_states())
        .filter(|&s| mdp.is_absorbing(s))
        .map(|s| (0..ages).map(|k| last[s * ages + k]).sum::<f64>())
        .sum();
    Ok(ExactExposure {
        total,
        per_step,
        state_part: sp,
        action_part: ap,
        discounted_return: ret,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::test_util::{random_mdp, random_policy};
    use crate::monitoring::uniform_hazard;
    use crate::policy::action_divergence;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_policies_give_zero_table() {
        let mdp = random_mdp(1, 3, 2, 5);
        let pi = random_policy(2, 3, 2);
        let tab = build_state_ratio(&mdp, &pi, &pi, DEFAULT_RATIO_FLOOR).unwrap();
        for t in 0..=5 {
            for s in 0..3 {
                assert_eq!(tab.log_ratio(t, s), 0.0);
                assert!(tab.is_valid(t, s));
            }
        }
    }

    #[test]
    fn disjoint_supports_mask_and_clip() {
        // s0 --a0--> s0, s0 --a1--> s1 ; s1 absorbing loop
        let mdp = TabularMdp::new(2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0], vec![0.0; 4], 0.9, vec![1.0, 0.0], 2).unwrap();
        let pi = TabularPolicy::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let pr = TabularPolicy::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let tab = build_state_ratio(&mdp, &pi, &pr, DEFAULT_RATIO_FLOOR).unwrap();
        assert!(!tab.is_valid(1, 1));
        assert!(tab.is_valid(1, 0));
        assert!(tab.is_clipped(1, 0));
        assert!(tab.log_ratio(1, 0).is_finite());
    }

    #[test]
    fn tom_scalar_cases() {
        assert_eq!(tom_scalar(0.0, 3.0, 2.0).psi, 0.0);
        assert_eq!(tom_scalar(1.0, 0.0, 0.0).psi, 0.0);
        assert_abs_diff_eq!(tom_scalar(0.5, 0.2, 0.6).psi, 0.4, epsilon = 1e-12);
        assert!(tom_scalar(1.0, -1.0, 0.2).psi < 0.0);
    }

    #[test]
    fn llr_hand_value() {
        let mdp = random_mdp(3, 2, 2, 3);
        let pi = TabularPolicy::from_rows(&[vec![0.8, 0.2], vec![0.5, 0.5]]).unwrap();
        let pr = TabularPolicy::from_rows(&[vec![0.4, 0.6], vec![0.5, 0.5]]).unwrap();
        let mut tab = build_state_ratio(&mdp, &pi, &pr, DEFAULT_RATIO_FLOOR).unwrap();
        tab.log_ratio[1][0] = 0.1;
        let v = observed_llr(&pi, &pr, &tab, 1, 0, 0).unwrap();
        assert_abs_diff_eq!(v, 0.1 + 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.7931, epsilon = 1e-4);
        // equal action probabilities leave only the state term
        let v = observed_llr(&pi, &pr, &tab, 1, 1, 0).unwrap();
        assert_eq!(v, tab.log_ratio(1, 1));
    }

    #[test]
    fn llr_of_identical_policies_vanishes() {
        let mdp = random_mdp(4, 3, 3, 4);
        let pi = random_policy(5, 3, 3);
        let tab = build_state_ratio(&mdp, &pi, &pi, DEFAULT_RATIO_FLOOR).unwrap();
        for s in 0..3 {
            for a in 0..3 {
                assert_eq!(observed_llr(&pi, &pi, &tab, 2, s, a).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn masked_llr_errors() {
        let mdp = TabularMdp::new(2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0], vec![0.0; 4], 0.9, vec![1.0, 0.0], 2).unwrap();
        let pi = TabularPolicy::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let pr = TabularPolicy::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let tab = build_state_ratio(&mdp, &pi, &pr, DEFAULT_RATIO_FLOOR).unwrap();
        assert!(matches!(observed_llr(&pi, &pr, &tab, 1, 1, 0), Err(Error::MaskedState { .. })));
    }

    #[test]
    fn expected_llr_decomposes_per_state() {
        let mdp = random_mdp(7, 4, 3, 4);
        let pi = random_policy(8, 4, 3);
        let pr = random_policy(9, 4, 3);
        let tab = build_state_ratio(&mdp, &pi, &pr, DEFAULT_RATIO_FLOOR).unwrap();
        for t in 0..4 {
            for s in 0..4 {
                let e: f64 = (0..3).map(|a| pi.prob(s, a) * observed_llr(&pi, &pr, &tab, t, s, a).unwrap()).sum();
                let want = tab.log_ratio(t, s) + action_divergence(&pi, &pr, s).unwrap();
                assert_abs_diff_eq!(e, want, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn never_observed_means_zero_exposure() {
        let mdp = random_mdp(10, 2, 2, 3);
        let pi = ActingRule::from(random_policy(11, 2, 2));
        let pr = random_policy(12, 2, 2);
        let hz = uniform_hazard(5, 6).unwrap();
        let model = EvidenceModel::new(&mdp, &pi, &pr, &hz, TokenChannel::noiseless(1), DEFAULT_RATIO_FLOOR).unwrap();
        let (m, se) = expected_exposure(&model, 0.9, 200, 1).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn ledger_ema_stays_in_range() {
        let mut l = ExposureLedger::new(0.9, 0.5).keeping_records();
        let vals = [0.3, -0.2, 1.5, 0.7];
        for (t, &v) in vals.iter().enumerate() {
            l.push(tom_scalar(1.0, v, 0.0).at(t));
            let e = l.step_ema().unwrap();
            assert!((-0.2..=1.5).contains(&e));
        }
        let total = l.finish_episode();
        assert_abs_diff_eq!(total, 0.3 - 0.9 * 0.2 + 0.81 * 1.5 + 0.729 * 0.7, epsilon = 1e-12);
        assert_eq!(l.records.len(), 4);
        assert_eq!(l.discounted_sum(), 0.0);
    }

    #[test]
    fn exact_exposure_matches_monte_carlo() {
        let mdp = random_mdp(13, 3, 2, 6);
        let pr = random_policy(15, 3, 2);
        let task = AugmentedPolicy::from(&random_policy(14, 3, 2));
        let pi = ActingRule::hazard_switch(task, pr.clone(), 0.4).unwrap();
        let hz = uniform_hazard(1, 3).unwrap();
        let exact = exact_exposure(&mdp, &pi, &pr, &hz, DEFAULT_RATIO_FLOOR, 0.9).unwrap();
        let model = EvidenceModel::new(&mdp, &pi, &pr, &hz, TokenChannel::noiseless(1), DEFAULT_RATIO_FLOOR).unwrap();
        let (m, se) = expected_exposure(&model, 0.9, 20_000, 2).unwrap();
        assert!((m - exact.total).abs() <= 3.0 * se, "mc {m} ± {se} vs exact {}", exact.total);
    }
}
