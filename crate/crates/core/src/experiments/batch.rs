//! Seeded batches of random instances compared against path oracles.

use std::path::Path as FsPath;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::scenario::{GraphSpec, InitSpec, LeakageSpec, OutputSpec, PlantSpec, Real, Scenario, ScheduleSpec};
use super::{export, ExperimentError};
use crate::analysis::{detect_convergence, InvariantMonitor};
use crate::dynamics::{Control, Engine, EngineConfig, Observer, StepView, SystemState};
use crate::graph::{min_leakage_path, shortest_path, Path};
use crate::rules::RuleFunction;

/// Convergence thresholds reported alongside the primary one.
pub const SENSITIVITY_EPS: [f64; 3] = [0.1, 0.01, 0.001];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Fixed flow with random leakage; the target is the minimum-leakage path.
    AppendixCLeakage,
    /// Zero leakage, injections growing by 1.1 per step; the target is the
    /// planted shortest path.
    AppendixCIncreasing,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "appendixC-leakage" | "leakage" => Ok(Preset::AppendixCLeakage),
            "appendixC-increasing" | "increasing" => Ok(Preset::AppendixCIncreasing),
            other => Err(format!("unknown preset `{other}` (expected appendixC-leakage or appendixC-increasing)")),
        }
    }
}

impl Preset {
    pub fn label(self) -> &'static str {
        match self {
            Preset::AppendixCLeakage => "appendixC-leakage",
            Preset::AppendixCIncreasing => "appendixC-increasing",
        }
    }

    pub fn oracle(self) -> OracleKind {
        match self {
            Preset::AppendixCLeakage => OracleKind::MinLeakage,
            Preset::AppendixCIncreasing => OracleKind::Shortest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    MinLeakage,
    Shortest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOptions {
    /// Instances per family; the preset default when absent.
    pub instances: Option<usize>,
    pub base_seed: u64,
    pub full_scale: bool,
    pub workers: Option<usize>,
    pub epsilon: f64,
    /// Horizon override.
    pub steps: Option<u64>,
    /// Steps the tightest threshold must hold one path before a run stops
    /// early; a tenth of the horizon when absent.
    pub settle: Option<u64>,
    /// Also record first-detection times at every threshold in
    /// [`SENSITIVITY_EPS`].
    pub sensitivity: bool,
    pub invariants: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            instances: None,
            base_seed: 0,
            full_scale: false,
            workers: None,
            epsilon: 0.01,
            steps: None,
            settle: None,
            sensitivity: true,
            invariants: true,
        }
    }
}

/// A named group of instances sharing one scenario template.
#[derive(Debug, Clone)]
pub struct Family {
    pub name: String,
    pub count: usize,
    pub template: Scenario,
}

fn template(name: &str, graph: GraphSpec, preset: Preset, opts: &BatchOptions) -> Scenario {
    let flows = (Real::uniform(0.5, 1.0), Real::uniform(0.5, 1.0));
    let (leakage, schedule, steps) = match preset {
        Preset::AppendixCLeakage => {
            (LeakageSpec::Uniform { low: 0.0, high: 1.0 }, ScheduleSpec::Constant { f0: flows.0, b0: flows.1 }, 100_000)
        }
        Preset::AppendixCIncreasing => {
            (LeakageSpec::Zero, ScheduleSpec::Exponential { f0: flows.0, b0: flows.1, alpha: 1.1 }, 10_000)
        }
    };
    let mut sc = Scenario {
        name: name.into(),
        steps: opts.steps.unwrap_or(steps),
        seed: 0,
        epsilon: opts.epsilon,
        delta: Real::uniform(0.0, 1.0),
        underflow_threshold: 1e-300,
        rescale: None,
        stop_on_convergence: true,
        graph,
        leakage,
        rule: RuleFunction::Linear,
        schedule,
        init: InitSpec::Uniform { low: 0.0, high: 1.0 },
        monitors: Vec::new(),
        outputs: OutputSpec { csv: false, json: false, dot: false, ..OutputSpec::default() },
    };
    sc.rescale = Some(preset == Preset::AppendixCIncreasing);
    sc
}

/// Families of a preset with their instance counts.
pub fn preset_families(preset: Preset, opts: &BatchOptions) -> Vec<Family> {
    let gnp = |n, p, plant| GraphSpec::Gnp { n, p, plant };
    let banded = |n, p, k, plant| GraphSpec::BandedGnp { n, p, k, plant };
    let grid = |plant| GraphSpec::Grid { rows: 10, cols: 10, plant };
    let fams: Vec<(&str, GraphSpec, usize)> = match (preset, opts.full_scale) {
        (Preset::AppendixCLeakage, false) => {
            vec![("gnp(100,0.05)", gnp(100, 0.05, PlantSpec::None), 50)]
        }
        (Preset::AppendixCLeakage, true) => vec![
            ("gnp(100,0.05)", gnp(100, 0.05, PlantSpec::None), 1000),
            ("gnp(100,0.1)", gnp(100, 0.1, PlantSpec::None), 1000),
            ("gnp(100,0.5)", gnp(100, 0.5, PlantSpec::None), 1000),
            ("gnp(1000,0.01)", gnp(1000, 0.01, PlantSpec::None), 100),
            ("gnp(1000,0.1)", gnp(1000, 0.1, PlantSpec::None), 100),
            ("banded(100,0.5,10)", banded(100, 0.5, 10, PlantSpec::None), 1000),
            ("banded(1000,0.5,40)", banded(1000, 0.5, 40, PlantSpec::None), 100),
            ("grid(10x10)", grid(PlantSpec::None), 100),
        ],
        (Preset::AppendixCIncreasing, false) => {
            vec![("grid(10x10)", grid(PlantSpec::Random { length: 9 }), 10)]
        }
        (Preset::AppendixCIncreasing, true) => vec![
            ("gnp(100,0.05)", gnp(100, 0.05, PlantSpec::IfAmbiguous), 1000),
            ("gnp(1000,0.01)", gnp(1000, 0.01, PlantSpec::IfAmbiguous), 100),
            ("gnp(1000,0.005)", gnp(1000, 0.005, PlantSpec::IfAmbiguous), 100),
            ("banded(100,0.5,10)", banded(100, 0.5, 10, PlantSpec::BandedPattern), 1000),
            ("banded(1000,0.5,40)", banded(1000, 0.5, 40, PlantSpec::BandedPattern), 100),
            ("grid(10x10)", grid(PlantSpec::Random { length: 9 }), 100),
        ],
    };
    fams.into_iter()
        .map(|(name, graph, count)| Family {
            name: name.into(),
            count: opts.instances.map_or(count, |n| if opts.full_scale { n.min(count) } else { n }),
            template: template(name, graph, preset, opts),
        })
        .collect()
}

/// One seeded scenario per instance; seeds are `base_seed + global index`.
pub fn preset_jobs(preset: Preset, opts: &BatchOptions) -> Vec<(String, Scenario)> {
    let mut jobs = Vec::new();
    for fam in preset_families(preset, opts) {
        for _ in 0..fam.count {
            let mut sc = fam.template.clone();
            sc.seed = opts.base_seed.wrapping_add(jobs.len() as u64);
            sc.name = format!("{}#{}", fam.name, jobs.len());
            jobs.push((fam.name.clone(), sc));
        }
    }
    jobs
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityEntry {
    pub epsilon: f64,
    /// First step the detector reported any path.
    pub first_detection: Option<u64>,
    /// Start of the final uninterrupted detection.
    pub time: Option<u64>,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRow {
    pub index: usize,
    pub family: String,
    pub seed: u64,
    pub vertices: usize,
    pub edges: usize,
    pub delta: f64,
    pub converged: bool,
    pub converged_path: Option<String>,
    pub oracle_path: Option<String>,
    pub planted_path: Option<String>,
    pub matched: bool,
    pub steps_to_converge: Option<u64>,
    /// The converged path still passes the detector on the final state.
    pub final_check: bool,
    pub invariant_violations: u64,
    /// Times a detected path was lost again before the run settled.
    pub transients: u64,
    pub steps_run: u64,
    pub sensitivity: Vec<SensitivityEntry>,
    pub error: Option<String>,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilySummary {
    pub family: String,
    pub instances: usize,
    pub matches: usize,
    pub match_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchResult {
    pub label: String,
    pub instances: usize,
    pub matches: usize,
    pub match_rate: f64,
    pub errors: usize,
    pub total_runtime_ms: f64,
    pub families: Vec<FamilySummary>,
    pub rows: Vec<BatchRow>,
}

impl BatchResult {
    fn new(label: &str, rows: Vec<BatchRow>, total_runtime_ms: f64) -> Self {
        let mut families: Vec<FamilySummary> = Vec::new();
        for row in &rows {
            let pos = match families.iter().position(|f| f.family == row.family) {
                Some(i) => i,
                None => {
                    families.push(FamilySummary {
                        family: row.family.clone(),
                        instances: 0,
                        matches: 0,
                        match_rate: 0.0,
                    });
                    families.len() - 1
                }
            };
            families[pos].instances += 1;
            families[pos].matches += row.matched as usize;
        }
        for f in &mut families {
            f.match_rate = f.matches as f64 / f.instances as f64;
        }
        let matches = rows.iter().filter(|r| r.matched).count();
        Self {
            label: label.into(),
            instances: rows.len(),
            matches,
            match_rate: if rows.is_empty() { 0.0 } else { matches as f64 / rows.len() as f64 },
            errors: rows.iter().filter(|r| r.error.is_some()).count(),
            total_runtime_ms,
            families,
            rows,
        }
    }
}

/// First detection time and path at each threshold.
/// Tracks, per threshold, the start of the current uninterrupted detection
/// of one path. Stops the run once the tightest threshold has held its path
/// for `settle` steps.
struct Thresholds {
    eps: Vec<f64>,
    streaks: Vec<Option<(u64, Path)>>,
    first: Vec<Option<u64>>,
    lost: Vec<u64>,
    tightest: usize,
    settle: u64,
}

impl Thresholds {
    fn new(eps: Vec<f64>, settle: u64) -> Self {
        let n = eps.len();
        let tightest = (0..n).min_by(|&a, &b| eps[a].total_cmp(&eps[b])).unwrap_or(0);
        Self { eps, streaks: vec![None; n], first: vec![None; n], lost: vec![0; n], tightest, settle }
    }

    fn check(&mut self, state: &SystemState, engine: &Engine<'_>) -> bool {
        for i in 0..self.eps.len() {
            let now = detect_convergence(state, engine.graph(), self.eps[i]);
            let same = matches!((&self.streaks[i], &now), (Some((_, a)), Some(b)) if a == b);
            if same {
                continue;
            }
            if self.streaks[i].is_some() {
                self.lost[i] += 1;
            }
            if now.is_some() && self.first[i].is_none() {
                self.first[i] = Some(state.t);
            }
            self.streaks[i] = now.map(|p| (state.t, p));
        }
        matches!(&self.streaks[self.tightest], Some((t0, _)) if state.t - t0 >= self.settle)
    }
}

impl Observer for Thresholds {
    fn start(&mut self, state: &SystemState, engine: &Engine<'_>) {
        self.check(state, engine);
    }

    fn observe(&mut self, view: &StepView<'_>) -> Control {
        if self.check(view.current, view.engine) {
            Control::Stop("settled".into())
        } else {
            Control::Continue
        }
    }
}

struct Invariants(InvariantMonitor);

impl Observer for Invariants {
    fn observe(&mut self, view: &StepView<'_>) -> Control {
        self.0.check(view);
        Control::Continue
    }
}

/// Runs one instance; failures are recorded in the row.
pub fn run_instance(index: usize, family: &str, sc: &Scenario, oracle: OracleKind, opts: &BatchOptions) -> BatchRow {
    let started = Instant::now();
    let mut row = BatchRow {
        index,
        family: family.into(),
        seed: sc.seed,
        vertices: 0,
        edges: 0,
        delta: f64::NAN,
        converged: false,
        converged_path: None,
        oracle_path: None,
        planted_path: None,
        matched: false,
        steps_to_converge: None,
        final_check: false,
        invariant_violations: 0,
        transients: 0,
        steps_run: 0,
        sensitivity: Vec::new(),
        error: None,
        runtime_ms: 0.0,
    };
    if let Err(e) = fill_row(&mut row, sc, oracle, opts) {
        row.error = Some(e.to_string());
    }
    row.runtime_ms = started.elapsed().as_secs_f64() * 1e3;
    row
}

fn fill_row(row: &mut BatchRow, sc: &Scenario, oracle: OracleKind, opts: &BatchOptions) -> Result<(), ExperimentError> {
    let inst = sc.instantiate()?;
    let g = &inst.graph;
    row.vertices = g.num_vertices();
    row.edges = g.num_edges();
    row.delta = inst.config.delta;
    row.planted_path = inst.planted.as_ref().map(Path::id);
    let target = match oracle {
        OracleKind::MinLeakage => min_leakage_path(g),
        OracleKind::Shortest => inst.planted.clone().or_else(|| shortest_path(g)),
    };
    row.oracle_path = target.as_ref().map(Path::id);

    let mut eps: Vec<f64> = vec![sc.epsilon];
    if opts.sensitivity {
        eps.extend(SENSITIVITY_EPS.iter().copied().filter(|e| *e != sc.epsilon));
    }
    let settle = opts.settle.unwrap_or(sc.steps / 10);
    let cfg = EngineConfig { epsilon_convergence: None, stop_on_convergence: false, ..inst.config.clone() };
    let engine = Engine::new(g, inst.rule.clone(), inst.schedule, cfg)?;
    let state = engine.init_state(&inst.init)?;
    let mut thresholds = Thresholds::new(eps, settle);
    let mut invariants = Invariants(InvariantMonitor::default());
    let trace = if opts.invariants {
        engine.run(state, sc.steps, &mut [&mut thresholds, &mut invariants])?
    } else {
        engine.run(state, sc.steps, &mut [&mut thresholds])?
    };
    if let crate::dynamics::StopReason::Aborted { message, .. } = &trace.stop_reason {
        row.error = Some(message.clone());
    }
    row.invariant_violations = invariants.0.violation_count;
    row.transients = thresholds.lost[0];
    row.steps_run = trace.steps_run;
    if let Some((t, p)) = &thresholds.streaks[0] {
        row.converged = true;
        row.steps_to_converge = Some(*t);
        row.converged_path = Some(p.id());
        row.matched = Some(p) == target.as_ref();
        row.final_check = detect_convergence(&trace.final_state, g, sc.epsilon).as_ref() == Some(p);
    }
    let mut sens: Vec<SensitivityEntry> = (0..thresholds.eps.len())
        .map(|i| {
            let streak = thresholds.streaks[i].as_ref();
            SensitivityEntry {
                epsilon: thresholds.eps[i],
                first_detection: thresholds.first[i],
                time: streak.map(|h| h.0),
                matched: streak.map(|h| &h.1) == target.as_ref(),
            }
        })
        .collect();
    sens.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    row.sensitivity = sens;
    Ok(())
}

fn pool(workers: Option<usize>) -> rayon::ThreadPool {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w.max(1));
    }
    b.build().expect("thread pool")
}

/// Runs `jobs` concurrently (up to `opts.workers` threads). Rows come back in
/// job order whatever the completion order.
pub fn run_batch(label: &str, jobs: &[(String, Scenario)], oracle: OracleKind, opts: &BatchOptions) -> BatchResult {
    let started = Instant::now();
    let rows: Vec<BatchRow> = pool(opts.workers).install(|| {
        jobs.par_iter().enumerate().map(|(i, (family, sc))| run_instance(i, family, sc, oracle, opts)).collect()
    });
    BatchResult::new(label, rows, started.elapsed().as_secs_f64() * 1e3)
}

pub fn run_preset(preset: Preset, opts: &BatchOptions) -> BatchResult {
    run_batch(preset.label(), &preset_jobs(preset, opts), preset.oracle(), opts)
}

/// `batch.csv` (one row per instance) and `batch.json` (everything).
pub fn write_batch(dir: &FsPath, result: &BatchResult) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("batch.csv"))?;
    let mut header = vec![
        "index",
        "family",
        "seed",
        "vertices",
        "edges",
        "delta",
        "converged",
        "converged_path",
        "oracle_path",
        "matched",
        "steps_to_converge",
        "transients",
        "steps_run",
        "final_check",
        "invariant_violations",
        "error",
        "runtime_ms",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    let sens_eps: Vec<f64> =
        result.rows.first().map(|r| r.sensitivity.iter().map(|s| s.epsilon).collect()).unwrap_or_default();
    for e in &sens_eps {
        header.push(format!("t_eps_{e}"));
        header.push(format!("matched_eps_{e}"));
    }
    w.write_record(&header)?;
    let opt = |x: Option<u64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in &result.rows {
        let mut rec = vec![
            r.index.to_string(),
            r.family.clone(),
            r.seed.to_string(),
            r.vertices.to_string(),
            r.edges.to_string(),
            r.delta.to_string(),
            r.converged.to_string(),
            r.converged_path.clone().unwrap_or_default(),
            r.oracle_path.clone().unwrap_or_default(),
            r.matched.to_string(),
            opt(r.steps_to_converge),
            r.transients.to_string(),
            r.steps_run.to_string(),
            r.final_check.to_string(),
            r.invariant_violations.to_string(),
            r.error.clone().unwrap_or_default(),
            format!("{:.3}", r.runtime_ms),
        ];
        for e in &sens_eps {
            let s = r.sensitivity.iter().find(|s| s.epsilon == *e);
            rec.push(opt(s.and_then(|s| s.time)));
            rec.push(s.is_some_and(|s| s.matched).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    export::write_json(&dir.join("batch.json"), result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_counts() {
        let reduced = BatchOptions::default();
        assert_eq!(preset_jobs(Preset::AppendixCLeakage, &reduced).len(), 50);
        assert_eq!(preset_jobs(Preset::AppendixCIncreasing, &reduced).len(), 10);
        let full = BatchOptions { full_scale: true, ..BatchOptions::default() };
        assert_eq!(preset_jobs(Preset::AppendixCLeakage, &full).len(), 4400);
        assert_eq!(preset_jobs(Preset::AppendixCIncreasing, &full).len(), 2400);
        let capped = BatchOptions { full_scale: true, instances: Some(2), ..BatchOptions::default() };
        assert_eq!(preset_jobs(Preset::AppendixCLeakage, &capped).len(), 16);
    }

    #[test]
    fn preset_templates_validate() {
        for preset in [Preset::AppendixCLeakage, Preset::AppendixCIncreasing] {
            let opts = BatchOptions { full_scale: true, ..BatchOptions::default() };
            for fam in preset_families(preset, &opts) {
                fam.template.validate().unwrap();
            }
        }
        let leak = &preset_families(Preset::AppendixCLeakage, &BatchOptions::default())[0].template;
        assert_eq!(leak.delta, Real::uniform(0.0, 1.0));
        assert_eq!(leak.init, InitSpec::Uniform { low: 0.0, high: 1.0 });
        assert_eq!(leak.steps, 100_000);
    }

    #[test]
    fn single_instance_is_reproducible() {
        let opts = BatchOptions { instances: Some(1), base_seed: 11, ..BatchOptions::default() };
        let a = run_preset(Preset::AppendixCIncreasing, &opts);
        let b = run_preset(Preset::AppendixCIncreasing, &opts);
        assert_eq!(a.instances, 1);
        let strip = |mut r: BatchRow| {
            r.runtime_ms = 0.0;
            r
        };
        assert_eq!(strip(a.rows[0].clone()), strip(b.rows[0].clone()));
        assert!(a.rows[0].matched, "{:?}", a.rows[0]);
    }

    #[test]
    fn preset_names_parse() {
        assert_eq!("appendixC-leakage".parse::<Preset>().unwrap(), Preset::AppendixCLeakage);
        assert!("nope".parse::<Preset>().is_err());
    }
}
