//! `tomstealth`: train, evaluate, compare, sweep and calibrate from one
//! experiment file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tomstealth_core::acting::ActingRule;
use tomstealth_core::config::ExperimentConfig;
use tomstealth_core::evidence::{EvidenceModel, DEFAULT_RATIO_FLOOR};
use tomstealth_core::harness::{self, EvalSettings};
use tomstealth_core::learner::{monitor_conditioning, train_online};
use tomstealth_core::policy::{AugmentedPolicy, Conditioning, PolicyFile};
use tomstealth_core::rng::derive_seed;

pub const POLICY_FILE: &str = "policy.json";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "traces.jsonl";
pub const COMPARE_FILE: &str = "compare.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";

#[derive(Parser, Debug)]
#[command(name = "tomstealth", version, about = "Monitored-deception experiments on grid scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run this seed only, ignoring the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the learner with the first seed; writes the policy and training log.
    Train(Common),
    /// Evaluate a policy file; writes per-episode metrics and step traces.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Baselines plus the learner, averaged over seeds.
    Compare(Common),
    /// Retrain at every gap window listed under `[sweep]`.
    Sweep(Common),
    /// Reliability bins of predicted against realized evidence for a policy.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

fn runtime(e: tomstealth_core::Error) -> Failure {
    Failure::Runtime(e.to_string())
}

struct Loaded {
    config: ExperimentConfig,
    out: PathBuf,
    fingerprint: String,
}

fn load(common: &Common) -> Result<Loaded, Failure> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Failure::Validation(format!("{}: {e}", common.config.display())))?;
    let mut config = ExperimentConfig::parse(&text)
        .map_err(|e| Failure::Validation(format!("{}: {e}", common.config.display())))?;
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&config.output.dir));
    // The output location is not part of the experiment's identity.
    let mut keyed = config.clone();
    keyed.output.dir.clear();
    let fingerprint = harness::fingerprint(&keyed).map_err(runtime)?;
    Ok(Loaded { config, out, fingerprint })
}

fn load_policy(path: &Path, config: &ExperimentConfig) -> Result<AugmentedPolicy, Failure> {
    let invalid = |m: String| Failure::Validation(format!("{}: {m}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
    let policy = PolicyFile::from_json(&text)
        .and_then(PolicyFile::into_policy)
        .map_err(|e| invalid(e.to_string()))?;
    let scenario = config.build_scenario().map_err(runtime)?;
    if policy.num_states() != scenario.mdp.num_states() || policy.num_actions() != scenario.mdp.num_actions() {
        return Err(invalid(format!(
            "policy is {}x{}, scenario is {}x{}",
            policy.num_states(),
            policy.num_actions(),
            scenario.mdp.num_states(),
            scenario.mdp.num_actions()
        )));
    }
    let hazard = config.hazard().map_err(runtime)?;
    let channel = config.channel().map_err(runtime)?;
    let expected = monitor_conditioning(&hazard, &channel, config.learner.belief_bins);
    if policy.conditioning() != Conditioning::None && policy.conditioning() != expected {
        return Err(invalid(format!(
            "policy conditioning {:?} does not match the configured monitor ({expected:?})",
            policy.conditioning()
        )));
    }
    Ok(policy)
}

/// Writes `contents` to `dir/name` through a temporary file and a rename.
fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::Runtime(format!("{}: {e}", dir.join(name).display()));
    fs::create_dir_all(dir).map_err(io)?;
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, dir.join(name)).map_err(io)
}

fn eval_settings(config: &ExperimentConfig, seed: u64) -> EvalSettings {
    EvalSettings {
        seed: derive_seed(seed, 1),
        ..config.eval.clone()
    }
}

fn train(common: &Common) -> Result<(), Failure> {
    let Loaded { config, out, fingerprint } = load(common)?;
    let scenario = config.build_scenario().map_err(runtime)?;
    let hazard = config.hazard().map_err(runtime)?;
    let channel = config.channel().map_err(runtime)?;
    let learner = tomstealth_core::LearnerConfig {
        seed: config.seeds[0],
        ..config.learner.clone()
    };
    let agent = train_online(&scenario.mdp, &scenario.reference, &hazard, channel, &learner).map_err(runtime)?;
    let policy = PolicyFile::from_policy(&agent.policy).to_json().map_err(runtime)?;
    let log = harness::training_log_csv(&agent.log, &fingerprint);
    write_atomic(&out, POLICY_FILE, &policy)?;
    write_atomic(&out, TRAINING_LOG_FILE, &log)?;
    let tail = &agent.log[agent.log.len().saturating_sub(100)..];
    let n = tail.len().max(1) as f64;
    println!(
        "seed={} return={:.4} exposure={:.4} lambda={:.4}",
        learner.seed,
        tail.iter().map(|r| r.discounted_return).sum::<f64>() / n,
        tail.iter().map(|r| r.exposure).sum::<f64>() / n,
        agent.dual.lambda
    );
    Ok(())
}

fn eval(common: &Common, policy_path: &Path) -> Result<(), Failure> {
    let Loaded { config, out, fingerprint } = load(common)?;
    let policy = load_policy(policy_path, &config)?;
    let scenario = config.build_scenario().map_err(runtime)?;
    let hazard = config.hazard().map_err(runtime)?;
    let channel = config.channel().map_err(runtime)?;
    let seed = config.seeds[0];
    let settings = eval_settings(&config, seed);
    let rule = ActingRule::from(policy);
    let report = harness::evaluate_rule(&scenario.mdp, &rule, &scenario.reference, &hazard, channel, &settings, "policy")
        .map_err(runtime)?;
    let model = EvidenceModel::new(&scenario.mdp, &rule, &scenario.reference, &hazard, channel, DEFAULT_RATIO_FLOOR)
        .map_err(runtime)?;
    let traces = harness::traces(&model, config.output.trace_episodes, settings.top_k, derive_seed(seed, 2))
        .map_err(runtime)?;
    write_atomic(&out, METRICS_FILE, &harness::metrics_csv(&report, &fingerprint))?;
    write_atomic(&out, TRACE_FILE, &traces)?;
    println!(
        "return={:.4} success={:.4} kl={:.4} llr={:.4} top_k={:.4} ttf={:.2} exposure={:.4}",
        report.mean_return,
        report.success_rate,
        report.kl_at_obs,
        report.llr_at_obs,
        report.top_k,
        report.mean_ttf,
        report.exposure
    );
    Ok(())
}

fn compare(common: &Common) -> Result<(), Failure> {
    let Loaded { config, out, fingerprint } = load(common)?;
    if config.baselines.is_empty() {
        return Err(Failure::Validation("no [[baselines]] entries to compare".into()));
    }
    let scenario = config.build_scenario().map_err(runtime)?;
    let hazard = config.hazard().map_err(runtime)?;
    let channel = config.channel().map_err(runtime)?;
    let table = harness::compare_table(
        &scenario,
        &hazard,
        channel,
        &config.baselines,
        &config.learner,
        &config.seeds,
        &config.eval,
    )
    .map_err(runtime)?;
    let csv = harness::compare_csv(&table, &fingerprint);
    write_atomic(&out, COMPARE_FILE, &csv)?;
    print!("{}", csv.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    Ok(())
}

fn sweep(common: &Common) -> Result<(), Failure> {
    let Loaded { config, out, fingerprint } = load(common)?;
    let gaps = config.sweep_gaps();
    if gaps.is_empty() {
        return Err(Failure::Validation("[sweep] gaps is empty".into()));
    }
    let scenario = config.build_scenario().map_err(runtime)?;
    let channel = config.channel().map_err(runtime)?;
    let table = harness::gap_sweep(&scenario, &gaps, channel, &config.learner, &config.seeds, &config.eval)
        .map_err(runtime)?;
    write_atomic(&out, SWEEP_FILE, &harness::sweep_csv(&table, &fingerprint))?;
    for p in table.summary() {
        println!(
            "L={} U={} return={:.4} exposure={:.4} ttf={:.2}",
            p.lower, p.upper, p.mean_return, p.mean_exposure, p.mean_ttf
        );
    }
    Ok(())
}

fn calibrate(common: &Common, policy_path: &Path) -> Result<(), Failure> {
    let Loaded { config, out, fingerprint } = load(common)?;
    let policy = load_policy(policy_path, &config)?;
    let scenario = config.build_scenario().map_err(runtime)?;
    let hazard = config.hazard().map_err(runtime)?;
    let channel = config.channel().map_err(runtime)?;
    let rule = ActingRule::from(policy);
    let model = EvidenceModel::new(&scenario.mdp, &rule, &scenario.reference, &hazard, channel, DEFAULT_RATIO_FLOOR)
        .map_err(runtime)?;
    let bins = harness::reliability(
        &model,
        config.eval.episodes,
        config.output.calibration_bins,
        derive_seed(config.seeds[0], 3),
    )
    .map_err(runtime)?;
    write_atomic(&out, CALIBRATION_FILE, &harness::calibration_csv(&bins, &fingerprint))?;
    match (bins.slope, bins.intercept) {
        (Some(s), Some(c)) => println!("slope={s:.4} intercept={c:.4}"),
        _ => println!("degenerate: predicted evidence is constant"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Eval { common, policy } => eval(common, policy),
        Command::Compare(c) => compare(c),
        Command::Sweep(c) => sweep(c),
        Command::Calibrate { common, policy } => calibrate(common, policy),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tomstealth: {e}");
            ExitCode::from(e.code())
        }
    }
}
