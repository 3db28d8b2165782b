//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invariant violation, 2 configuration error,
//! 3 engine abort.

use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use antflow::adversarial::{
    flow_counterexample, leakage_counterexample, run_counterexample, swap_batch, unidirectional_swap_demo,
    CounterexampleReport, FlowOptions, LeakageOptions, SwapOptions, SwapReport,
};
use antflow::equilibria::{equilibrium_drift, stability_experiment, EquilibriumSpec, StabilityParams};
use antflow::experiments::batch::{preset_families, run_batch, run_preset, write_batch, OracleKind, Preset};
use antflow::experiments::export::{write_json, write_series};
use antflow::experiments::{parse_scenario, run_scenario, BatchOptions, ExperimentError, Scenario};
use antflow::graph::build_two_path;
use antflow::rules::{stable_fixed_points, validate_rule, DecisionRule, RuleFunction, DEFAULT_GRID, DEFAULT_TOL};

/// Prints a line to stdout; a closed pipe (`| head`) is not an error.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

const EXIT_INVARIANT: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 3;

#[derive(Parser)]
#[command(name = "antflow", version, about = "Bidirectional pheromone flow simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed overriding the one in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Step horizon.
    #[arg(long)]
    steps: Option<u64>,
    /// Convergence threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Directory for CSV, JSON and DOT artifacts.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single scenario from a TOML file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a preset or a config-defined family of seeded instances.
    Batch {
        /// appendixC-leakage or appendixC-increasing.
        #[arg(long, default_value = "appendixC-leakage")]
        preset: String,
        /// Scenario template replacing the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Instances per family.
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Use the full published instance counts and every graph family.
        #[arg(long)]
        full_scale: bool,
        /// Steps the detected path must persist before a run stops early.
        #[arg(long)]
        settle: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Fixed points, stable points and optional perturbation experiments.
    AnalyzeRule {
        /// linear, power:K or sine:A.
        #[arg(long)]
        rule: String,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        /// Perturbation seeds per stable point; 0 skips the experiments.
        #[arg(long, default_value_t = 0)]
        seeds: u64,
        /// Return threshold for the perturbation experiments.
        #[arg(long, default_value_t = 1e-3)]
        target: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Build and verify a construction on which a non-proportional rule fails.
    Counterexample {
        #[arg(long)]
        rule: String,
        #[arg(long, value_enum, default_value_t = CxKind::Leakage)]
        kind: CxKind,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        /// Survival factors TOP,BOTTOM for the leakage construction.
        #[arg(long, value_delimiter = ',')]
        survival: Option<Vec<f64>>,
        /// Per-step growth factor for the flow construction.
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
    /// One-way flow: swapping the pheromone on s's edges swaps the outcome.
    SwapDemo {
        #[arg(long, default_value = "power:2")]
        rule: String,
        #[arg(long)]
        p_top: Option<f64>,
        #[arg(long)]
        p_bottom: Option<f64>,
        /// Number of seeded random initial pairs when no pair is given.
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CxKind {
    Leakage,
    Flow,
}

/// Failure carrying its exit code.
struct Failure(u8, String);

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let code = match e {
            ExperimentError::Engine(_) => EXIT_ABORT,
            _ => EXIT_CONFIG,
        };
        Failure(code, e.to_string())
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure(EXIT_CONFIG, e.to_string())
}

fn parse_rule(text: &str) -> Result<RuleFunction, Failure> {
    let (name, arg) = text.split_once(':').map_or((text, None), |(a, b)| (a, Some(b)));
    let num = |s: Option<&str>| -> Result<f64, Failure> {
        s.ok_or_else(|| config_err(format!("rule `{text}` needs a parameter")))?
            .parse::<f64>()
            .map_err(|e| config_err(format!("rule `{text}`: {e}")))
    };
    let rule = match name {
        "linear" => RuleFunction::Linear,
        "power" => RuleFunction::power(num(arg)?).map_err(config_err)?,
        "sine" => RuleFunction::sine(num(arg)?).map_err(config_err)?,
        other => return Err(config_err(format!("unknown rule `{other}` (linear, power:K, sine:A)"))),
    };
    if let Some(v) = validate_rule(&rule, DEFAULT_GRID).first() {
        return Err(config_err(format!("rule `{text}` is not admissible: {v:?}")));
    }
    Ok(rule)
}

fn load_scenario(path: &FsPath, common: &Common) -> Result<Scenario, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut sc = parse_scenario(&text)?;
    if let Some(s) = common.seed {
        sc.seed = s;
    }
    if let Some(s) = common.steps {
        sc.steps = s;
    }
    if let Some(e) = common.epsilon {
        sc.epsilon = e;
    }
    sc.validate()?;
    Ok(sc)
}

fn ensure_dir(dir: &Option<PathBuf>) -> Result<(), Failure> {
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| config_err(format!("{}: {e}", d.display())))?;
    }
    Ok(())
}

fn io<T>(r: Result<T, ExperimentError>) -> Result<T, Failure> {
    r.map_err(|e| Failure(EXIT_CONFIG, e.to_string()))
}

fn cmd_run(config: &FsPath, common: &Common) -> Result<u8, Failure> {
    let sc = load_scenario(config, common)?;
    let out = run_scenario(&sc, common.out_dir.as_deref())?;
    let report = out.report(&sc);
    out!("{}", serde_json::to_string_pretty(&summary_only(&report)).expect("serializable"));
    if out.trace.aborted() {
        return Ok(EXIT_ABORT);
    }
    Ok(if out.monitors.violated() { EXIT_INVARIANT } else { 0 })
}

/// The report without the bulky final state.
fn summary_only(report: &antflow::experiments::ScenarioReport) -> serde_json::Value {
    let mut v = serde_json::to_value(report).expect("serializable");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("final_state");
    }
    v
}

fn cmd_batch(
    preset: &str,
    config: Option<&FsPath>,
    instances: Option<usize>,
    workers: Option<usize>,
    full_scale: bool,
    settle: Option<u64>,
    common: &Common,
) -> Result<u8, Failure> {
    let mut opts = BatchOptions {
        instances,
        workers,
        full_scale,
        settle,
        steps: common.steps,
        base_seed: common.seed.unwrap_or(0),
        ..BatchOptions::default()
    };
    if let Some(e) = common.epsilon {
        opts.epsilon = e;
    }
    let result = match config {
        Some(path) => {
            let sc = load_scenario(path, common)?;
            let oracle = match sc.schedule {
                antflow::experiments::scenario::ScheduleSpec::Constant { .. } => OracleKind::MinLeakage,
                _ => OracleKind::Shortest,
            };
            let count = instances.unwrap_or(10);
            let jobs: Vec<(String, Scenario)> = (0..count)
                .map(|i| {
                    let mut s = sc.clone();
                    s.seed = sc.seed.wrapping_add(i as u64);
                    s.outputs.csv = false;
                    (sc.name.clone(), s)
                })
                .collect();
            run_batch(&sc.name, &jobs, oracle, &opts)
        }
        None => {
            let preset: Preset = preset.parse().map_err(config_err)?;
            for fam in preset_families(preset, &opts) {
                fam.template.validate()?;
            }
            run_preset(preset, &opts)
        }
    };
    ensure_dir(&common.out_dir)?;
    if let Some(dir) = &common.out_dir {
        io(write_batch(dir, &result))?;
    }
    out!(
        "{}: {} instances, {} matched ({:.1}%), {} errors, {:.1} s",
        result.label,
        result.instances,
        result.matches,
        100.0 * result.match_rate,
        result.errors,
        result.total_runtime_ms / 1e3
    );
    for f in &result.families {
        out!("  {:<22} {:>5} / {:<5} {:.3}", f.family, f.matches, f.instances, f.match_rate);
    }
    if result.rows.iter().any(|r| r.invariant_violations > 0) {
        return Ok(EXIT_INVARIANT);
    }
    if result.rows.iter().any(|r| r.error.as_deref().is_some_and(|e| e.contains("non-finite"))) {
        return Ok(EXIT_ABORT);
    }
    Ok(0)
}

fn cmd_analyze_rule(rule: &str, grid: usize, seeds: u64, target: f64, common: &Common) -> Result<u8, Failure> {
    let g = parse_rule(rule)?;
    let report = stable_fixed_points(&g, grid, DEFAULT_TOL);
    ensure_dir(&common.out_dir)?;
    let mut doc = serde_json::json!({
        "rule": g.label(),
        "grid": grid,
        "fixed_points": report.fixed_points,
        "identically_fixed": report.identically_fixed,
        "stable": report.stable,
    });
    let mut drift = Vec::new();
    for &r in &report.fixed_points {
        let spec = EquilibriumSpec { r, f_s: 1.0, b_d: 1.0, delta: 0.5 };
        let tp = build_two_path(2, 3, &[0.0], &[0.0, 0.0]).map_err(config_err)?;
        let d = equilibrium_drift(&tp, &g, spec, 100).map_err(config_err)?;
        drift.push(serde_json::json!({ "r": r, "drift_100_steps": d }));
    }
    doc["equilibrium_drift"] = serde_json::Value::Array(drift);
    let mut experiments = Vec::new();
    let mut all_held = true;
    for sp in &report.stable {
        for seed in 0..seeds {
            let params = StabilityParams { seed, ..StabilityParams::default() };
            let steps = common.steps.unwrap_or(10_000);
            let mut rep = stability_experiment(&g, sp.r, sp.r_eps / 4.0, target, steps, params).map_err(config_err)?;
            if let Some(dir) = &common.out_dir {
                let p = dir.join(format!("drift_r{}_seed{seed}.csv", sp.r));
                io(write_series(&p, "drift", &rep.drift_series))?;
                rep.max_drift_series_path = Some(p.display().to_string());
            }
            all_held &= rep.held_until_tmax;
            experiments.push(rep);
        }
    }
    doc["stability_experiments"] = serde_json::to_value(&experiments).expect("serializable");
    if let Some(dir) = &common.out_dir {
        io(write_json(&dir.join("rule_report.json"), &doc))?;
    }
    out!("{}", serde_json::to_string_pretty(&doc).expect("serializable"));
    Ok(if all_held { 0 } else { EXIT_INVARIANT })
}

#[allow(clippy::too_many_arguments)]
fn cmd_counterexample(
    rule: &str,
    kind: CxKind,
    r: Option<f64>,
    eps: Option<f64>,
    survival: Option<Vec<f64>>,
    mu: Option<f64>,
    m: usize,
    n: usize,
    common: &Common,
) -> Result<u8, Failure> {
    let g = parse_rule(rule)?;
    let zeros = |k: usize| vec![0.0; k.saturating_sub(1)];
    let tp = build_two_path(m, n, &zeros(m), &zeros(n)).map_err(config_err)?;
    let (cx, default_horizon) = match kind {
        CxKind::Leakage => {
            let survival = match survival.as_deref() {
                None => None,
                Some(&[top, bottom]) => Some((top, bottom)),
                Some(_) => return Err(Failure(2, "--survival takes exactly two values TOP,BOTTOM".into())),
            };
            let opts = LeakageOptions { survival, r, eps, ..LeakageOptions::default() };
            (leakage_counterexample(&g, &tp, 1.0, 1.0, opts).map_err(config_err)?, 100_000)
        }
        CxKind::Flow => {
            let opts = FlowOptions { mu, r, eps, ..FlowOptions::default() };
            (flow_counterexample(&g, &tp, 1.0, opts).map_err(config_err)?, 10_000)
        }
    };
    let horizon = common.steps.unwrap_or(default_horizon);
    let outcome = run_counterexample(&cx, horizon).map_err(|e| Failure(EXIT_ABORT, e.to_string()))?;
    let report = CounterexampleReport::new(&cx, outcome);
    ensure_dir(&common.out_dir)?;
    if let Some(dir) = &common.out_dir {
        io(write_json(&dir.join("counterexample.json"), &report))?;
    }
    out!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(if report.invariant_held { 0 } else { EXIT_INVARIANT })
}

#[allow(clippy::too_many_arguments)]
fn cmd_swap(
    rule: &str,
    p_top: Option<f64>,
    p_bottom: Option<f64>,
    count: usize,
    m: usize,
    n: usize,
    common: &Common,
) -> Result<u8, Failure> {
    let g = DecisionRule::from(parse_rule(rule)?);
    let zeros = |k: usize| vec![0.0; k.saturating_sub(1)];
    let tp = build_two_path(m, n, &zeros(m), &zeros(n)).map_err(config_err)?;
    let mut opts = SwapOptions::default();
    if let Some(s) = common.steps {
        opts.horizon = s;
    }
    if let Some(e) = common.epsilon {
        opts.epsilon = e;
    }
    let reports: Vec<SwapReport> = match (p_top, p_bottom) {
        (Some(a), Some(b)) => vec![unidirectional_swap_demo(&tp, &g, a, b, opts).map_err(config_err)?],
        (None, None) => swap_batch(&tp, &g, count, common.seed.unwrap_or(0), opts).map_err(config_err)?,
        _ => return Err(config_err("give both --p-top and --p-bottom, or neither")),
    };
    let flipped = reports.iter().filter(|r| r.flipped).count();
    let considered = reports.iter().filter(|r| !r.degenerate).count();
    let doc = serde_json::json!({
        "rule": g.label(),
        "runs": reports,
        "flipped": flipped,
        "non_degenerate": considered,
        "flip_rate": if considered > 0 { flipped as f64 / considered as f64 } else { 0.0 },
    });
    ensure_dir(&common.out_dir)?;
    if let Some(dir) = &common.out_dir {
        io(write_json(&dir.join("swap.json"), &doc))?;
    }
    out!("{}", serde_json::to_string_pretty(&doc).expect("serializable"));
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, common } => cmd_run(config, common),
        Command::Batch { preset, config, instances, workers, full_scale, settle, common } => {
            cmd_batch(preset, config.as_deref(), *instances, *workers, *full_scale, *settle, common)
        }
        Command::AnalyzeRule { rule, grid, seeds, target, common } => {
            cmd_analyze_rule(rule, *grid, *seeds, *target, common)
        }
        Command::Counterexample { rule, kind, r, eps, survival, mu, m, n, common } => {
            cmd_counterexample(rule, *kind, *r, *eps, survival.clone(), *mu, *m, *n, common)
        }
        Command::SwapDemo { rule, p_top, p_bottom, count, m, n, common } => {
            cmd_swap(rule, *p_top, *p_bottom, *count, *m, *n, common)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
