//! Renewal monitoring: gap laws, hazards, the exact age filter under delayed
//! (possibly noisy) tokens, and the supervisor's observation simulator.
//!
//! Age convention: `K_t` counts ticks since the most recent observation
//! strictly before `t`; the episode starts at age 0 as if an observation had
//! just happened. Tick `t` is observed with probability `h(K_t)`. After an
//! observation the next tick has age 1, otherwise the age grows by one, so a
//! gap drawn from `{L..U}` is exactly the age at which the next observation
//! fires.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::bernoulli;

const SUM_TOL: f64 = 1e-9;

/// Distribution of the gap between consecutive observations, supported on `{lower..upper}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapLaw {
    lower: usize,
    upper: usize,
    pmf: Vec<f64>,
}

impl GapLaw {
    /// `pmf[i]` is the probability of gap `lower + i`.
    pub fn new(lower: usize, upper: usize, pmf: Vec<f64>) -> Result<Self> {
        if lower < 1 || upper < lower {
            return Err(Error::param("gap bounds", format!("need 1 <= L <= U, got L={lower}, U={upper}")));
        }
        if pmf.len() != upper - lower + 1 {
            return Err(Error::DimensionMismatch(format!(
                "gap pmf has {} entries for window {lower}..={upper}",
                pmf.len()
            )));
        }
        let sum: f64 = pmf.iter().sum();
        if pmf.iter().any(|p| !(*p > 0.0)) || (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "gap pmf must be positive on its window and sum to 1 (sum {sum})"
            )));
        }
        Ok(Self { lower, upper, pmf })
    }

    pub fn uniform(lower: usize, upper: usize) -> Result<Self> {
        if lower < 1 || upper < lower {
            return Err(Error::param("gap bounds", format!("need 1 <= L <= U, got L={lower}, U={upper}")));
        }
        let n = upper - lower + 1;
        Self::new(lower, upper, vec![1.0 / n as f64; n])
    }

    pub fn lower(&self) -> usize {
        self.lower
    }
    pub fn upper(&self) -> usize {
        self.upper
    }
    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }
    /// Probability of gap `g` (zero outside the window).
    pub fn prob(&self, g: usize) -> f64 {
        if g < self.lower || g > self.upper {
            0.0
        } else {
            self.pmf[g - self.lower]
        }
    }
}

/// Per-age hazard `h(k)`, `k = 0..=U`, with `h(U) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardModel {
    hazard: Vec<f64>,
}

impl HazardModel {
    pub fn new(hazard: Vec<f64>) -> Result<Self> {
        if hazard.is_empty() {
            return Err(Error::DimensionMismatch("empty hazard".into()));
        }
        if hazard.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return Err(Error::param("hazard", "entries must lie in [0, 1]"));
        }
        if (hazard[hazard.len() - 1] - 1.0).abs() > 1e-12 {
            return Err(Error::param("hazard", "h(U) must equal 1"));
        }
        Ok(Self { hazard })
    }

    pub fn upper(&self) -> usize {
        self.hazard.len() - 1
    }

    /// Smallest age with positive hazard.
    pub fn lower(&self) -> usize {
        self.hazard.iter().position(|&h| h > 0.0).unwrap_or(self.upper())
    }

    pub fn at(&self, age: usize) -> f64 {
        self.hazard[age.min(self.upper())]
    }

    pub fn values(&self) -> &[f64] {
        &self.hazard
    }

    /// Gap pmf recovered as `h(k)·Π_{j<k}(1 − h(j))` for `k = 0..=U`.
    pub fn gap_pmf(&self) -> Vec<f64> {
        let mut survive = 1.0;
        self.hazard
            .iter()
            .map(|&h| {
                let p = h * survive;
                survive *= 1.0 - h;
                p
            })
            .collect()
    }
}

/// Hazard of the uniform gap law on `{lower..upper}`: `1/(U−k+1)` on the window.
pub fn uniform_hazard(lower: usize, upper: usize) -> Result<HazardModel> {
    if lower < 1 || upper < lower {
        return Err(Error::param("gap bounds", format!("need 1 <= L <= U, got L={lower}, U={upper}")));
    }
    let hazard = (0..=upper)
        .map(|k| if k >= lower { 1.0 / (upper - k + 1) as f64 } else { 0.0 })
        .collect();
    HazardModel::new(hazard)
}

pub fn hazard_from_gap_law(law: &GapLaw) -> HazardModel {
    let mut hazard = vec![0.0; law.upper + 1];
    let mut tail: f64 = law.pmf.iter().sum();
    for k in law.lower..=law.upper {
        let p = law.prob(k);
        hazard[k] = if tail > 0.0 { (p / tail).clamp(0.0, 1.0) } else { 1.0 };
        tail -= p;
    }
    hazard[law.upper] = 1.0;
    HazardModel { hazard }
}

/// Distribution over the age `{0..U}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeBelief {
    pub alpha: Vec<f64>,
}

impl AgeBelief {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        let sum: f64 = alpha.iter().sum();
        if alpha.is_empty() || alpha.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidDistribution(format!("age belief sums to {sum}")));
        }
        Ok(Self { alpha })
    }

    pub fn point(age: usize, upper: usize) -> Self {
        let mut alpha = vec![0.0; upper + 1];
        alpha[age.min(upper)] = 1.0;
        Self { alpha }
    }

    /// The age if the belief is a point mass.
    pub fn exact_age(&self) -> Option<usize> {
        self.alpha.iter().position(|&p| p > 1.0 - 1e-12)
    }
}

/// One-step renewal prediction with no information about tick `t`.
pub fn belief_predict(belief: &AgeBelief, hazard: &HazardModel) -> Result<AgeBelief> {
    let u = hazard.upper();
    if belief.alpha.len() != u + 1 {
        return Err(Error::DimensionMismatch(format!(
            "belief covers {} ages, hazard {}",
            belief.alpha.len(),
            u + 1
        )));
    }
    let mut out = vec![0.0; u + 1];
    for k in 0..=u {
        let m = belief.alpha[k];
        let h = hazard.at(k);
        if u >= 1 {
            out[1] += m * h;
        } else {
            out[0] += m;
        }
        if k < u {
            out[k + 1] += m * (1.0 - h);
        }
    }
    normalize(&mut out);
    Ok(AgeBelief { alpha: out })
}

/// `b̂ = Σ_k α_k h(k)`.
pub fn observation_probability(belief: &AgeBelief, hazard: &HazardModel) -> f64 {
    belief
        .alpha
        .iter()
        .zip(hazard.values())
        .map(|(a, h)| a * h)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

fn normalize(v: &mut [f64]) -> f64 {
    let z: f64 = v.iter().sum();
    if z > 0.0 {
        for x in v.iter_mut() {
            *x /= z;
        }
    }
    z
}

/// Delayed feedback channel: the token about tick `t` arrives at `t + delay`,
/// with `Pr(Y=1|O=1) = rho1` and `Pr(Y=1|O=0) = rho0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenChannel {
    pub delay: usize,
    pub rho1: f64,
    pub rho0: f64,
}

/// Largest supported delay; the filter carries `2^delay` lag patterns per age.
pub const MAX_DELAY: usize = 12;

impl TokenChannel {
    pub fn new(delay: usize, rho1: f64, rho0: f64) -> Result<Self> {
        if delay < 1 || delay > MAX_DELAY {
            return Err(Error::param("delay", format!("must be in 1..={MAX_DELAY}")));
        }
        if !(rho1 > 0.0 && rho1 <= 1.0) || !(rho0 >= 0.0) || !(rho0 < rho1) {
            return Err(Error::param("rho", "need 0 <= rho0 < rho1 <= 1"));
        }
        Ok(Self { delay, rho1, rho0 })
    }

    pub fn noiseless(delay: usize) -> Self {
        Self { delay, rho1: 1.0, rho0: 0.0 }
    }

    pub fn is_noiseless(&self) -> bool {
        self.rho1 == 1.0 && self.rho0 == 0.0
    }

    /// Whether the age is exactly recoverable from tokens before acting.
    pub fn reveals_age(&self) -> bool {
        self.is_noiseless() && self.delay == 1
    }

    fn likelihood(&self, token: bool, observed: bool) -> f64 {
        match (token, observed) {
            (true, true) => self.rho1,
            (true, false) => self.rho0,
            (false, true) => 1.0 - self.rho1,
            (false, false) => 1.0 - self.rho0,
        }
    }
}

/// Exact Bayes filter over `(age, observation bits of the last delay ticks)`.
///
/// Bit `j` of the pattern holds `O_{t-1-j}`, so the token arriving at `t`
/// (about `t - delay`) reweights on bit `delay - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeFilter {
    hazard: HazardModel,
    channel: TokenChannel,
    joint: Vec<f64>,
    time: usize,
}

impl AgeFilter {
    /// Starts at age 0 with no earlier observations pending.
    pub fn new(hazard: HazardModel, channel: TokenChannel) -> Self {
        let patterns = 1usize << channel.delay;
        let mut joint = vec![0.0; (hazard.upper() + 1) * patterns];
        joint[0] = 1.0;
        Self {
            hazard,
            channel,
            joint,
            time: 0,
        }
    }

    fn patterns(&self) -> usize {
        1usize << self.channel.delay
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn hazard(&self) -> &HazardModel {
        &self.hazard
    }

    pub fn channel(&self) -> &TokenChannel {
        &self.channel
    }

    /// Marginal belief over the current age.
    pub fn belief(&self) -> AgeBelief {
        let np = self.patterns();
        let alpha = self.joint.chunks(np).map(|c| c.iter().sum()).collect();
        AgeBelief { alpha }
    }

    pub fn observation_probability(&self) -> f64 {
        observation_probability(&self.belief(), &self.hazard)
    }

    pub fn exact_age(&self) -> Option<usize> {
        self.belief().exact_age()
    }

    /// Posterior probability that the tick `delay` steps back was observed.
    pub fn lagged_observation_probability(&self) -> f64 {
        let np = self.patterns();
        let bit = 1usize << (self.channel.delay - 1);
        self.joint
            .iter()
            .enumerate()
            .filter(|(i, _)| (i % np) & bit != 0)
            .map(|(_, p)| p)
            .sum()
    }

    /// Overwrites the lagged bit marginal, keeping the age marginal within each
    /// branch proportional. Used to seed filters in tests and diagnostics.
    pub fn set_lagged_prior(&mut self, p_observed: f64) {
        let np = self.patterns();
        let bit = 1usize << (self.channel.delay - 1);
        let (mut on, mut off) = (0.0, 0.0);
        for (i, p) in self.joint.iter().enumerate() {
            if (i % np) & bit != 0 {
                on += p;
            } else {
                off += p;
            }
        }
        if on == 0.0 || off == 0.0 {
            // duplicate the pattern into both branches
            let mut fresh = vec![0.0; self.joint.len()];
            for (i, p) in self.joint.iter().enumerate() {
                let base = i & !bit;
                fresh[base] += p * (1.0 - p_observed);
                fresh[base | bit] += p * p_observed;
            }
            self.joint = fresh;
            return;
        }
        for (i, p) in self.joint.iter_mut().enumerate() {
            if (i % np) & bit != 0 {
                *p *= p_observed / on;
            } else {
                *p *= (1.0 - p_observed) / off;
            }
        }
    }

    /// Applies the token delivered at the current tick, if any.
    pub fn apply_token(&mut self, token: Option<bool>) -> Result<()> {
        let Some(y) = token else { return Ok(()) };
        let np = self.patterns();
        let bit = 1usize << (self.channel.delay - 1);
        for (i, p) in self.joint.iter_mut().enumerate() {
            let observed = (i % np) & bit != 0;
            *p *= self.channel.likelihood(y, observed);
        }
        let z = normalize(&mut self.joint);
        if !(z > 0.0) {
            return Err(Error::TokenContradiction);
        }
        Ok(())
    }

    /// Advances one tick without information about the current tick.
    pub fn predict(&mut self) {
        let np = self.patterns();
        let mask = np - 1;
        let u = self.hazard.upper();
        let mut next = vec![0.0; self.joint.len()];
        for (i, &m) in self.joint.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let age = i / np;
            let bits = i % np;
            let h = self.hazard.at(age);
            let shifted = (bits << 1) & mask;
            if h > 0.0 {
                next[np + (shifted | 1)] += m * h;
            }
            if age < u && h < 1.0 {
                next[(age + 1) * np + shifted] += m * (1.0 - h);
            }
        }
        normalize(&mut next);
        self.joint = next;
        self.time += 1;
    }
}

/// Bayesian reweighting by the token about the tick `lag` steps back.
pub fn belief_token_update(filter: &AgeFilter, channel: &TokenChannel, token: Option<bool>, lag: usize) -> Result<AgeFilter> {
    if lag != channel.delay || channel != &filter.channel {
        return Err(Error::param("lag", format!("token lag {lag} does not match channel delay {}", channel.delay)));
    }
    let mut out = filter.clone();
    out.apply_token(token)?;
    Ok(out)
}

/// A token in flight: the value about tick `about`, delivered at tick `due`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub due: usize,
    pub about: usize,
    pub value: bool,
}

/// Supervisor-side monitoring state. The age is private to the simulator.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonitorState {
    pub now: usize,
    pub age: usize,
    pub pending: VecDeque<Token>,
}

impl MonitorState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs one tick: returns whether the tick is observed and the tokens
    /// delivered at it (about tick `now − delay`).
    pub fn tick<R: Rng + ?Sized>(&mut self, hazard: &HazardModel, channel: &TokenChannel, rng: &mut R) -> (bool, Vec<Token>) {
        let mut due = Vec::new();
        while let Some(tok) = self.pending.front() {
            if tok.due == self.now {
                due.push(*tok);
                self.pending.pop_front();
            } else {
                break;
            }
        }
        let observed = bernoulli(hazard.at(self.age), rng);
        let value = bernoulli(if observed { channel.rho1 } else { channel.rho0 }, rng);
        self.pending.push_back(Token {
            due: self.now + channel.delay,
            about: self.now,
            value,
        });
        self.age = if observed { 1 } else { (self.age + 1).min(hazard.upper()) };
        self.now += 1;
        (observed, due)
    }

    /// Removes the tokens due at the current tick without advancing it.
    pub fn take_due(&mut self) -> Vec<Token> {
        let mut due = Vec::new();
        while let Some(tok) = self.pending.front() {
            if tok.due == self.now {
                due.push(*tok);
                self.pending.pop_front();
            } else {
                break;
            }
        }
        due
    }
}

/// Functional form of [`MonitorState::tick`] using the gap law's hazard.
pub fn simulate_monitor<R: Rng + ?Sized>(
    state: &MonitorState,
    law: &GapLaw,
    channel: &TokenChannel,
    rng: &mut R,
) -> (MonitorState, bool, Vec<Token>) {
    let hazard = hazard_from_gap_law(law);
    let mut next = state.clone();
    let (observed, due) = next.tick(&hazard, channel, rng);
    (next, observed, due)
}

/// Result of fitting a hazard from a noiseless token history.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardEstimate {
    pub hazard: HazardModel,
    /// Per-age count of ticks at risk.
    pub at_risk: Vec<usize>,
    /// Every age in the window was reached and every gap fell inside it.
    pub exact_reconstruction: bool,
    /// Some window age was never at risk; its value falls back to the uniform prior.
    pub partial: bool,
}

/// Empirical conditional observation frequencies with add-one smoothing,
/// from the per-tick token stream of a noiseless channel (token `i` is `O_i`).
pub fn estimate_hazard(history: &[bool], lower: usize, upper: usize, channel: &TokenChannel) -> Result<HazardEstimate> {
    if !channel.is_noiseless() {
        return Err(Error::param("channel", "hazard estimation requires a noiseless channel"));
    }
    let prior = uniform_hazard(lower, upper)?;
    let mut at_risk = vec![0usize; upper + 1];
    let mut events = vec![0usize; upper + 1];
    let mut consistent = true;
    let mut age = 0usize;
    for &obs in history {
        if age > upper {
            consistent = false;
            age = upper;
        }
        at_risk[age] += 1;
        if obs {
            events[age] += 1;
            if age < lower {
                consistent = false;
            }
            age = 1;
        } else {
            age += 1;
        }
    }
    let mut hazard = vec![0.0; upper + 1];
    let mut partial = false;
    for k in lower..upper {
        hazard[k] = if at_risk[k] == 0 {
            partial = true;
            prior.at(k)
        } else {
            (events[k] as f64 + 1.0) / (at_risk[k] as f64 + 2.0)
        };
    }
    hazard[upper] = 1.0;
    if at_risk[upper] == 0 && upper > lower {
        partial = true;
    }
    if history.is_empty() {
        partial = true;
    }
    Ok(HazardEstimate {
        hazard: HazardModel::new(hazard)?,
        at_risk,
        exact_reconstruction: consistent && !partial,
        partial,
    })
}
