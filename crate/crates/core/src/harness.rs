//! Supervisor detector, evaluation metrics, reliability bins, the gap sweep
//! and baseline comparison tables.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acting::ActingRule;
use crate::baselines::{self, BaselineContext, BaselineSpec};
use crate::environments::Scenario;
use crate::error::{Error, Result};
use crate::evidence::{
    exact_exposure, run_monitored_episode, run_scored_episode, EvidenceModel, MonitoredEpisode, DEFAULT_RATIO_FLOOR,
    DEFAULT_TOP_K,
};
use crate::learner::{train_online, EpisodeLog, LearnerConfig, TrainedAgent};
use crate::mdp::{discounted_return, TabularMdp};
use crate::monitoring::{uniform_hazard, HazardModel, TokenChannel};
use crate::policy::{kl_rows, TabularPolicy};
use crate::rng::{derive_seed, seeded};

/// Cumulative observed-LLR test against a fixed threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub cumulative: f64,
    pub threshold: f64,
    pub detected: bool,
    /// Time of the observed step at which the statistic first exceeded the threshold.
    pub first_crossing: Option<usize>,
    /// Sum over only the last `w` contributions when set.
    pub window: Option<usize>,
    recent: VecDeque<f64>,
}

impl DetectorState {
    pub fn new(threshold: f64) -> Self {
        Self {
            cumulative: 0.0,
            threshold,
            detected: false,
            first_crossing: None,
            window: None,
            recent: VecDeque::new(),
        }
    }

    pub fn windowed(threshold: f64, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::param("window", "must be at least 1"));
        }
        Ok(Self {
            window: Some(window),
            ..Self::new(threshold)
        })
    }

    /// The statistic compared with the threshold.
    pub fn statistic(&self) -> f64 {
        match self.window {
            Some(_) => self.recent.iter().sum(),
            None => self.cumulative,
        }
    }
}

/// Feeds one observed step. The flag never resets.
pub fn detector_step(mut state: DetectorState, contribution: f64, time: usize) -> DetectorState {
    state.cumulative += contribution;
    if let Some(w) = state.window {
        state.recent.push_back(contribution);
        if state.recent.len() > w {
            state.recent.pop_front();
        }
    }
    if !state.detected && state.statistic() > state.threshold {
        state.detected = true;
        state.first_crossing = Some(time);
    }
    state
}

/// Largest detector statistic reached over the observed steps of an episode,
/// `-inf` if nothing was observed.
pub fn max_statistic(ep: &MonitoredEpisode, window: Option<usize>) -> f64 {
    let mut det = match window {
        Some(w) => DetectorState::windowed(f64::INFINITY, w.max(1)).expect("window is positive"),
        None => DetectorState::new(f64::INFINITY),
    };
    let mut best = f64::NEG_INFINITY;
    for st in ep.steps.iter().filter(|s| s.step.observed) {
        det = detector_step(det, st.llr, st.step.time);
        best = best.max(det.statistic());
    }
    best
}

fn default_eval_episodes() -> usize {
    1000
}
fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_false_alarm_rate() -> f64 {
    0.05
}
fn default_calibration_episodes() -> usize {
    1000
}

/// Evaluation and detector settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_eval_episodes")]
    pub episodes: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Share of compliant episodes allowed to trip the detector.
    #[serde(default = "default_false_alarm_rate")]
    pub false_alarm_rate: f64,
    /// Explicit threshold; skips calibration when set.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default = "default_calibration_episodes")]
    pub calibration_episodes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: default_eval_episodes(),
            top_k: default_top_k(),
            false_alarm_rate: default_false_alarm_rate(),
            threshold: None,
            window: None,
            calibration_episodes: default_calibration_episodes(),
            seed: 0,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::param("episodes", "must be positive"));
        }
        if self.top_k == 0 {
            return Err(Error::param("top_k", "must be at least 1"));
        }
        if self.window == Some(0) {
            return Err(Error::param("window", "must be at least 1"));
        }
        if self.threshold.is_none() {
            check_rate(self.false_alarm_rate, self.calibration_episodes)?;
        }
        Ok(())
    }
}

fn check_rate(rate: f64, episodes: usize) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::param("false_alarm_rate", format!("{rate} is outside (0, 1)")));
    }
    if (episodes as f64) * rate < 1.0 {
        return Err(Error::InsufficientData(format!(
            "{episodes} calibration episodes cannot resolve a {rate} quantile"
        )));
    }
    Ok(())
}

const CALIBRATION_STREAM: u64 = 0xca1;

/// Empirical `(1 − rate)` quantile of the episode-maximal statistic when the
/// agent actually runs `π^S`, scored against the model's alternative.
pub fn calibrate_threshold(
    model: &EvidenceModel<'_>,
    rate: f64,
    episodes: usize,
    window: Option<usize>,
    seed: u64,
) -> Result<f64> {
    check_rate(rate, episodes)?;
    let compliant = ActingRule::from(model.pi_ref.clone());
    let base = derive_seed(seed, CALIBRATION_STREAM);
    let mut stats = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut rng = seeded(derive_seed(base, i as u64));
        let ep = run_scored_episode(model, &compliant, 1, &mut rng)?;
        stats.push(max_statistic(&ep, window));
    }
    stats.sort_by(f64::total_cmp);
    let idx = ((1.0 - rate) * episodes as f64).ceil() as usize;
    Ok(stats[idx.clamp(1, episodes) - 1])
}

/// One evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub discounted_return: f64,
    pub success: bool,
    pub observations: usize,
    pub kl_sum: f64,
    pub llr_sum: f64,
    pub top_k_hits: usize,
    /// Steps until first detection; the horizon when never detected.
    pub ttf: usize,
    pub censored: bool,
    pub exposure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub threshold: f64,
    /// Exact when the channel reveals the age, Monte Carlo otherwise (same for
    /// success rate and exposure).
    pub mean_return: f64,
    pub success_rate: f64,
    pub kl_at_obs: f64,
    pub llr_at_obs: f64,
    pub top_k: f64,
    pub mean_ttf: f64,
    pub censored_rate: f64,
    pub exposure: f64,
    pub rows: Vec<EpisodeRow>,
}

fn score_row(i: usize, ep: &MonitoredEpisode, model: &EvidenceModel<'_>, threshold: f64, window: Option<usize>) -> Result<EpisodeRow> {
    let mdp = model.mdp;
    let mut det = match window {
        Some(w) => DetectorState::windowed(threshold, w)?,
        None => DetectorState::new(threshold),
    };
    let (mut obs, mut kl, mut llr, mut hits) = (0, 0.0, 0.0, 0);
    for st in ep.steps.iter().filter(|s| s.step.observed) {
        obs += 1;
        kl += st.record.delta;
        llr += st.llr;
        hits += usize::from(st.in_top_k);
        det = detector_step(det, st.llr, st.step.time);
    }
    let discount = mdp.discount();
    Ok(EpisodeRow {
        episode: i,
        discounted_return: discounted_return(&ep.trace, discount),
        success: ep.trace.success,
        observations: obs,
        kl_sum: kl,
        llr_sum: llr,
        top_k_hits: hits,
        ttf: det.first_crossing.map_or(mdp.horizon(), |t| t + 1),
        censored: !det.detected,
        exposure: ep.discounted_exposure(discount),
    })
}

/// Runs `settings.episodes` monitored episodes under the model's rule and
/// aggregates the metrics. KL, LLR and top-k are pooled over observed frames.
pub fn evaluate(model: &EvidenceModel<'_>, threshold: f64, settings: &EvalSettings, method: &str) -> Result<MetricsReport> {
    settings.validate()?;
    let mut rows = Vec::with_capacity(settings.episodes);
    for i in 0..settings.episodes {
        let mut rng = seeded(derive_seed(settings.seed, i as u64));
        let ep = run_monitored_episode(model, settings.top_k, &mut rng)?;
        rows.push(score_row(i, &ep, model, threshold, settings.window)?);
    }
    let n = rows.len() as f64;
    let obs: usize = rows.iter().map(|r| r.observations).sum();
    let pooled = |f: &dyn Fn(&EpisodeRow) -> f64| {
        if obs == 0 {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / obs as f64
        }
    };
    let mean = |f: &dyn Fn(&EpisodeRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        method: method.to_string(),
        seed: settings.seed,
        threshold,
        mean_return: mean(&|r| r.discounted_return),
        success_rate: mean(&|r| f64::from(u8::from(r.success))),
        kl_at_obs: pooled(&|r| r.kl_sum),
        llr_at_obs: pooled(&|r| r.llr_sum),
        top_k: pooled(&|r| r.top_k_hits as f64),
        mean_ttf: mean(&|r| r.ttf as f64),
        censored_rate: mean(&|r| f64::from(u8::from(r.censored))),
        exposure: mean(&|r| r.exposure),
        rows,
    })
}

/// Builds the evidence model for `rule`, calibrates the threshold unless one
/// is given, evaluates, and swaps in exact return, success and exposure when
/// the channel reveals the age.
pub fn evaluate_rule(
    mdp: &TabularMdp,
    rule: &ActingRule,
    pi_ref: &TabularPolicy,
    hazard: &HazardModel,
    channel: TokenChannel,
    settings: &EvalSettings,
    method: &str,
) -> Result<MetricsReport> {
    settings.validate()?;
    let model = EvidenceModel::new(mdp, rule, pi_ref, hazard, channel, DEFAULT_RATIO_FLOOR)?;
    let threshold = match settings.threshold {
        Some(t) => t,
        None => calibrate_threshold(
            &model,
            settings.false_alarm_rate,
            settings.calibration_episodes,
            settings.window,
            settings.seed,
        )?,
    };
    let mut report = evaluate(&model, threshold, settings, method)?;
    if channel.reveals_age() {
        let ex = exact_exposure(mdp, rule, pi_ref, hazard, DEFAULT_RATIO_FLOOR, mdp.discount())?;
        report.mean_return = ex.discounted_return;
        report.success_rate = ex.success;
        report.exposure = ex.total;
    }
    Ok(report)
}

/// Predicted ψ against realized evidence (the LLR when observed, else 0).
pub fn evidence_pairs(ep: &MonitoredEpisode) -> impl Iterator<Item = (f64, f64)> + '_ {
    ep.steps.iter().map(|s| (s.record.psi, s.llr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_predicted: Option<f64>,
    pub mean_realized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub bins: Vec<CalibrationBin>,
    /// Count-weighted least squares of bin means; `None` when degenerate.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// All predictions were identical.
    pub degenerate: bool,
}

/// Equal-width reliability bins over the predicted range.
pub fn calibration_bins(pairs: &[(f64, f64)], bins: usize) -> Result<CalibrationBins> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("empty evidence stream".into()));
    }
    if bins == 0 {
        return Err(Error::param("bins", "must be at least 1"));
    }
    if pairs.iter().any(|(p, r)| !p.is_finite() || !r.is_finite()) {
        return Err(Error::InvalidDistribution("non-finite evidence value".into()));
    }
    let lo = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        let n = pairs.len() as f64;
        return Ok(CalibrationBins {
            bins: vec![CalibrationBin {
                lower: lo,
                upper: hi,
                count: pairs.len(),
                mean_predicted: Some(lo),
                mean_realized: Some(pairs.iter().map(|p| p.1).sum::<f64>() / n),
            }],
            slope: None,
            intercept: None,
            degenerate: true,
        });
    }
    let width = (hi - lo) / bins as f64;
    let mut sums = vec![(0usize, 0.0, 0.0); bins];
    for &(p, r) in pairs {
        let b = (((p - lo) / width) as usize).min(bins - 1);
        sums[b].0 += 1;
        sums[b].1 += p;
        sums[b].2 += r;
    }
    let out: Vec<CalibrationBin> = sums
        .iter()
        .enumerate()
        .map(|(i, &(c, sp, sr))| CalibrationBin {
            lower: lo + i as f64 * width,
            upper: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            count: c,
            mean_predicted: (c > 0).then(|| sp / c as f64),
            mean_realized: (c > 0).then(|| sr / c as f64),
        })
        .collect();
    let n = pairs.len() as f64;
    let pts: Vec<(f64, f64, f64)> = out
        .iter()
        .filter_map(|b| Some((b.count as f64, b.mean_predicted?, b.mean_realized?)))
        .collect();
    let mx = pts.iter().map(|(w, x, _)| w * x).sum::<f64>() / n;
    let my = pts.iter().map(|(w, _, y)| w * y).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|(w, x, _)| w * (x - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|(w, x, y)| w * (x - mx) * (y - my)).sum();
    let (slope, intercept) = if pts.len() < 2 || sxx == 0.0 {
        (None, None)
    } else {
        let s = sxy / sxx;
        (Some(s), Some(my - s * mx))
    };
    Ok(CalibrationBins {
        bins: out,
        degenerate: slope.is_none(),
        slope,
        intercept,
    })
}

/// Bins the ψ stream of `episodes` rollouts of `model`'s rule.
pub fn reliability(model: &EvidenceModel<'_>, episodes: usize, bins: usize, seed: u64) -> Result<CalibrationBins> {
    let mut pairs = Vec::new();
    for i in 0..episodes {
        let mut rng = seeded(derive_seed(seed, i as u64));
        let ep = run_monitored_episode(model, DEFAULT_TOP_K, &mut rng)?;
        pairs.extend(evidence_pairs(&ep));
    }
    calibration_bins(&pairs, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lower: usize,
    pub upper: usize,
    pub gap: usize,
    pub seed: u64,
    pub discounted_return: f64,
    pub exposure: f64,
    pub mean_ttf: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lower: usize,
    pub upper: usize,
    pub gap: usize,
    pub mean_return: f64,
    pub mean_exposure: f64,
    pub mean_ttf: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// One point per consecutive run of rows sharing `(L, U)`, in sweep order.
    pub fn summary(&self) -> Vec<SweepPoint> {
        let mut out: Vec<SweepPoint> = Vec::new();
        let mut start = 0;
        while start < self.rows.len() {
            let key = (self.rows[start].lower, self.rows[start].upper);
            let end = self.rows[start..]
                .iter()
                .position(|r| (r.lower, r.upper) != key)
                .map_or(self.rows.len(), |p| start + p);
            let group = &self.rows[start..end];
            let n = group.len() as f64;
            out.push(SweepPoint {
                lower: key.0,
                upper: key.1,
                gap: key.1 - key.0,
                mean_return: group.iter().map(|r| r.discounted_return).sum::<f64>() / n,
                mean_exposure: group.iter().map(|r| r.exposure).sum::<f64>() / n,
                mean_ttf: group.iter().map(|r| r.mean_ttf).sum::<f64>() / n,
                seeds: group.len(),
            });
            start = end;
        }
        out
    }
}

/// Trains and evaluates the ToM learner at every `(L, U)` with the same
/// hyperparameters. Rows come out in `(gap, seed)` order.
pub fn gap_sweep(
    scenario: &Scenario,
    gaps: &[(usize, usize)],
    channel: TokenChannel,
    config: &LearnerConfig,
    seeds: &[u64],
    settings: &EvalSettings,
) -> Result<SweepTable> {
    if gaps.is_empty() {
        return Err(Error::Config("gap list is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    let mut table = SweepTable::default();
    for &(lower, upper) in gaps {
        let hazard = uniform_hazard(lower, upper)?;
        for &seed in seeds {
            let cfg = LearnerConfig { seed, ..config.clone() };
            let agent = train_online(&scenario.mdp, &scenario.reference, &hazard, channel, &cfg)?;
            let eval = EvalSettings {
                seed: derive_seed(seed, 1),
                ..settings.clone()
            };
            let report = evaluate_rule(&scenario.mdp, &agent.rule(), &scenario.reference, &hazard, channel, &eval, "tom")?;
            table.rows.push(SweepRow {
                lower,
                upper,
                gap: upper - lower,
                seed,
                discounted_return: report.mean_return,
                exposure: report.exposure,
                mean_ttf: report.mean_ttf,
                lambda: agent.dual.lambda,
            });
        }
    }
    Ok(table)
}

/// Averages of one method's metrics over seeds, or the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub seeds: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub kl_at_obs: f64,
    pub llr_at_obs: f64,
    pub top_k: f64,
    pub mean_ttf: f64,
    pub censored_rate: f64,
    pub exposure: f64,
    pub error: Option<String>,
}

impl MethodRow {
    fn from_reports(method: &str, reports: &[MetricsReport]) -> Self {
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            method: method.to_string(),
            seeds: reports.len(),
            mean_return: mean(|r| r.mean_return),
            success_rate: mean(|r| r.success_rate),
            kl_at_obs: mean(|r| r.kl_at_obs),
            llr_at_obs: mean(|r| r.llr_at_obs),
            top_k: mean(|r| r.top_k),
            mean_ttf: mean(|r| r.mean_ttf),
            censored_rate: mean(|r| r.censored_rate),
            exposure: mean(|r| r.exposure),
            error: None,
        }
    }

    fn failed(method: &str, err: &Error) -> Self {
        Self {
            method: method.to_string(),
            seeds: 0,
            mean_return: f64::NAN,
            success_rate: f64::NAN,
            kl_at_obs: f64::NAN,
            llr_at_obs: f64::NAN,
            top_k: f64::NAN,
            mean_ttf: f64::NAN,
            censored_rate: f64::NAN,
            exposure: f64::NAN,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompareTable {
    pub rows: Vec<MethodRow>,
}

impl CompareTable {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Label of the ToM learner's row.
pub const TOM_METHOD: &str = "tom";

/// One row per baseline spec plus the ToM learner. Shield, blend and switch
/// wrap the selfish policy trained with the same seed.
pub fn compare_table(
    scenario: &Scenario,
    hazard: &HazardModel,
    channel: TokenChannel,
    specs: &[BaselineSpec],
    config: &LearnerConfig,
    seeds: &[u64],
    settings: &EvalSettings,
) -> Result<CompareTable> {
    if specs.is_empty() {
        return Err(Error::Config("baseline list is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    settings.validate()?;
    let task_temperature = specs
        .iter()
        .find_map(|s| match s {
            BaselineSpec::Selfish { temperature } => Some(*temperature),
            _ => None,
        })
        .unwrap_or(0.01);
    let names: Vec<&str> = specs.iter().map(|s| s.name()).chain([TOM_METHOD]).collect();
    let mut reports: Vec<Result<Vec<MetricsReport>>> = names.iter().map(|_| Ok(Vec::new())).collect();
    for &seed in seeds {
        let cfg = LearnerConfig { seed, ..config.clone() };
        let ctx = BaselineContext {
            mdp: &scenario.mdp,
            pi_ref: &scenario.reference,
            hazard,
            channel,
            config: &cfg,
        };
        let eval = EvalSettings {
            seed: derive_seed(seed, 1),
            ..settings.clone()
        };
        let run = |rule: Result<ActingRule>, name: &str| {
            rule.and_then(|r| evaluate_rule(&scenario.mdp, &r, &scenario.reference, hazard, channel, &eval, name))
        };
        let selfish: Option<Result<TrainedAgent>> = specs
            .iter()
            .any(|s| s.needs_task() || matches!(s, BaselineSpec::Selfish { .. }))
            .then(|| baselines::selfish(&ctx, task_temperature));
        for (i, spec) in specs.iter().enumerate() {
            let rule = match (spec, &selfish) {
                (BaselineSpec::Selfish { temperature }, Some(Ok(agent))) if *temperature == task_temperature => {
                    Ok(agent.rule())
                }
                (s, Some(Err(e))) if s.needs_task() => Err(e.clone()),
                (s, Some(Ok(agent))) if s.needs_task() => baselines::build(s, &ctx, Some(&agent.policy)),
                (s, _) => baselines::build(s, &ctx, None),
            };
            push(&mut reports[i], run(rule, spec.name()));
        }
        let tom = train_online(&scenario.mdp, &scenario.reference, hazard, channel, &cfg).map(|a| a.rule());
        push(&mut reports[specs.len()], run(tom, TOM_METHOD));
    }
    let rows = names
        .iter()
        .zip(reports)
        .map(|(name, r)| match r {
            Ok(reps) => MethodRow::from_reports(name, &reps),
            Err(e) => MethodRow::failed(name, &e),
        })
        .collect();
    Ok(CompareTable { rows })
}

fn push(slot: &mut Result<Vec<MetricsReport>>, report: Result<MetricsReport>) {
    if let Ok(list) = slot {
        match report {
            Ok(r) => list.push(r),
            Err(e) => *slot = Err(e),
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

fn header(fp: &str, columns: &str) -> String {
    format!("# fingerprint: {fp}\n{columns}\n")
}

pub fn compare_csv(table: &CompareTable, fp: &str) -> String {
    let mut out = header(
        fp,
        "method,seeds,return,success_rate,kl_at_obs,llr_at_obs,top_k,ttf,censored_rate,exposure,error",
    );
    for r in &table.rows {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.seeds,
            num(r.mean_return),
            num(r.success_rate),
            num(r.kl_at_obs),
            num(r.llr_at_obs),
            num(r.top_k),
            num(r.mean_ttf),
            num(r.censored_rate),
            num(r.exposure),
            err
        );
    }
    out
}

pub fn sweep_csv(table: &SweepTable, fp: &str) -> String {
    let mut out = header(fp, "lower,upper,gap,seed,return,exposure,ttf,lambda");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.lower,
            r.upper,
            r.gap,
            r.seed,
            num(r.discounted_return),
            num(r.exposure),
            num(r.mean_ttf),
            num(r.lambda)
        );
    }
    out
}

pub fn metrics_csv(report: &MetricsReport, fp: &str) -> String {
    let mut out = header(
        fp,
        "episode,return,success,observations,kl_sum,llr_sum,top_k_hits,ttf,censored,exposure",
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.episode,
            num(r.discounted_return),
            u8::from(r.success),
            r.observations,
            num(r.kl_sum),
            num(r.llr_sum),
            r.top_k_hits,
            r.ttf,
            u8::from(r.censored),
            num(r.exposure)
        );
    }
    let _ = writeln!(
        out,
        "# summary: method={} threshold={} return={} success_rate={} kl_at_obs={} llr_at_obs={} top_k={} ttf={} censored_rate={} exposure={}",
        report.method,
        num(report.threshold),
        num(report.mean_return),
        num(report.success_rate),
        num(report.kl_at_obs),
        num(report.llr_at_obs),
        num(report.top_k),
        num(report.mean_ttf),
        num(report.censored_rate),
        num(report.exposure)
    );
    out
}

pub fn training_log_csv(log: &[EpisodeLog], fp: &str) -> String {
    let mut out = header(fp, "episode,return,exposure,lambda,exposure_ema");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.episode,
            num(r.discounted_return),
            num(r.exposure),
            num(r.lambda),
            num(r.exposure_ema)
        );
    }
    out
}

pub fn calibration_csv(bins: &CalibrationBins, fp: &str) -> String {
    let mut out = header(fp, "bin,lower,upper,count,mean_predicted,mean_realized");
    for (i, b) in bins.bins.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            i,
            num(b.lower),
            num(b.upper),
            b.count,
            b.mean_predicted.map(num).unwrap_or_default(),
            b.mean_realized.map(num).unwrap_or_default()
        );
    }
    match (bins.slope, bins.intercept) {
        (Some(s), Some(c)) => {
            let _ = writeln!(out, "# fit: slope={} intercept={}", num(s), num(c));
        }
        _ => out.push_str("# fit: degenerate\n"),
    }
    out
}

/// One line-delimited JSON record per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: usize,
    pub time: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub observed: bool,
    pub b_hat: f64,
    pub log_ratio: f64,
    pub delta: f64,
    pub psi: f64,
    pub cumulative_llr: f64,
}

pub fn trace_jsonl(episode: usize, ep: &MonitoredEpisode) -> Result<String> {
    let mut out = String::new();
    let mut cum = 0.0;
    for st in &ep.steps {
        cum += st.llr;
        let rec = TraceRecord {
            episode,
            time: st.step.time,
            state: st.step.state,
            action: st.step.action,
            reward: st.step.reward,
            observed: st.step.observed,
            b_hat: st.record.b_hat,
            log_ratio: st.record.log_ratio,
            delta: st.record.delta,
            psi: st.record.psi,
            cumulative_llr: cum,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// Rolls out `episodes` monitored episodes of the model's rule as JSONL.
pub fn traces(model: &EvidenceModel<'_>, episodes: usize, top_k: usize, seed: u64) -> Result<String> {
    let mut out = String::new();
    for i in 0..episodes {
        let mut rng = seeded(derive_seed(seed, i as u64));
        let ep = run_monitored_episode(model, top_k, &mut rng)?;
        out.push_str(&trace_jsonl(i, &ep)?);
    }
    Ok(out)
}

/// Mean `Δ` of a stationary policy over a set of states.
pub fn mean_divergence(pi: &TabularPolicy, pi_ref: &TabularPolicy, states: &[usize]) -> Result<f64> {
    if states.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &s in states {
        total += kl_rows(pi.row(s), pi_ref.row(s)).map_err(|action| Error::AbsoluteContinuity { state: s, action })?;
    }
    Ok(total / states.len() as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}
