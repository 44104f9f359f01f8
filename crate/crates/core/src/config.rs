//! Experiment configuration: one TOML file drives every CLI command.

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineSpec;
use crate::environments::{Scenario, ScenarioKind, ScenarioSpec};
use crate::error::{Error, Result};
use crate::harness::EvalSettings;
use crate::learner::LearnerConfig;
use crate::monitoring::{hazard_from_gap_law, GapLaw, HazardModel, TokenChannel};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Scenario preset plus optional overrides of its fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goals: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub starts: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discount: Option<f64>,
}

impl ScenarioConfig {
    pub fn spec(&self) -> ScenarioSpec {
        let floor = self.floor.unwrap_or(crate::environments::DEFAULT_FLOOR);
        let mut spec = match self.kind {
            ScenarioKind::PerimeterLap => ScenarioSpec::perimeter_lap(self.size, floor),
            ScenarioKind::AvoidZone => ScenarioSpec::avoid_zone(self.size, floor),
        };
        if let Some(v) = self.layers {
            spec.layers = v;
        }
        if let Some(v) = &self.goals {
            spec.goals = v.clone();
        }
        if let Some(v) = &self.starts {
            spec.starts = v.clone();
        }
        if let Some(v) = self.horizon {
            spec.horizon = v;
        }
        if let Some(v) = self.step_penalty {
            spec.step_penalty = v;
        }
        if let Some(v) = self.goal_reward {
            spec.goal_reward = v;
        }
        if let Some(v) = self.discount {
            spec.discount = v;
        }
        spec
    }
}

/// Gap window; `pmf` over `lower..=upper`, uniform when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapConfig {
    pub lower: usize,
    pub upper: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pmf: Option<Vec<f64>>,
}

impl GapConfig {
    pub fn law(&self) -> Result<GapLaw> {
        match &self.pmf {
            Some(p) => GapLaw::new(self.lower, self.upper, p.clone()),
            None => GapLaw::uniform(self.lower, self.upper),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default = "one")]
    pub delay: usize,
    #[serde(default = "one_f")]
    pub rho1: f64,
    #[serde(default)]
    pub rho0: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { delay: 1, rho1: 1.0, rho0: 0.0 }
    }
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_bins() -> usize {
    20
}
fn default_trace_episodes() -> usize {
    10
}
fn default_out() -> String {
    "out".into()
}

/// Gap windows for `sweep`; duplicates are kept.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub gaps: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: String,
    /// Episodes written to the trace log by `eval`.
    #[serde(default = "default_trace_episodes")]
    pub trace_episodes: usize,
    #[serde(default = "default_bins")]
    pub calibration_bins: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out(),
            trace_episodes: default_trace_episodes(),
            calibration_bins: default_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub scenario: ScenarioConfig,
    pub gap: GapConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    pub learner: LearnerConfig,
    #[serde(default)]
    pub baselines: Vec<BaselineSpec>,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A config that failed to load, with the 1-based line it refers to when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<ConfigError> for Error {
    fn from(e: ConfigError) -> Self {
        Error::Config(e.to_string())
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the offending line where possible.
    pub fn parse(source: &str) -> std::result::Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(source).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of(source, s.start)),
            message: e.message().trim().to_string(),
        })?;
        if let Err((table, key, err)) = cfg.check() {
            return Err(ConfigError {
                line: locate(source, table, &key),
                message: if table.is_empty() { err.to_string() } else { format!("[{table}] {err}") },
            });
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    fn check(&self) -> std::result::Result<(), (&'static str, String, Error)> {
        let at = |table: &'static str, key: &'static str| move |e: Error| (table, key.to_string(), e);
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err((
                "",
                "schema_version".into(),
                Error::Config(format!(
                    "unsupported schema version {} (expected {CONFIG_SCHEMA_VERSION})",
                    self.schema_version
                )),
            ));
        }
        if self.seeds.is_empty() {
            return Err(("", "seeds".into(), Error::Config("seed list is empty".into())));
        }
        self.scenario.spec().build().map_err(at("scenario", ""))?;
        self.gap.law().map_err(at("gap", "lower"))?;
        self.channel().map_err(at("channel", ""))?;
        self.learner.validate().map_err(|e| ("learner", param_name(&e), e))?;
        for b in &self.baselines {
            b.validate().map_err(at("baselines", "kind"))?;
        }
        self.eval.validate().map_err(|e| ("eval", param_name(&e), e))?;
        for &[l, u] in &self.sweep.gaps {
            GapLaw::uniform(l, u).map_err(at("sweep", "gaps"))?;
        }
        if self.output.calibration_bins == 0 {
            return Err(("output", "calibration_bins".into(), Error::Config("must be positive".into())));
        }
        Ok(())
    }

    pub fn build_scenario(&self) -> Result<Scenario> {
        self.scenario.spec().build()
    }

    pub fn hazard(&self) -> Result<HazardModel> {
        Ok(hazard_from_gap_law(&self.gap.law()?))
    }

    pub fn channel(&self) -> Result<TokenChannel> {
        TokenChannel::new(self.channel.delay, self.channel.rho1, self.channel.rho0)
    }

    pub fn sweep_gaps(&self) -> Vec<(usize, usize)> {
        self.sweep.gaps.iter().map(|&[l, u]| (l, u)).collect()
    }

    /// Replaces the seed list by a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }
}

fn param_name(e: &Error) -> String {
    match e {
        Error::InvalidParameter { name, .. } => name.clone(),
        _ => String::new(),
    }
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Line of `key = …` inside `[table]` (top level when `table` is empty), or
/// of the table header when the key is absent.
fn locate(source: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == table && header.is_none() {
                header = Some(i + 1);
            }
            continue;
        }
        if current == table && !key.is_empty() {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}
