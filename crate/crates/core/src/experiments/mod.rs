//! Scenario files, single runs with on-disk artifacts, and seeded batches.

pub mod batch;
pub mod export;
pub mod scenario;

use std::path::{Path as FsPath, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    check_potential_growth, theorem_constants, BoundCheck, GrowthViolation, InvariantMonitor, InvariantViolation,
    PheromoneBoundMonitor, PotentialMonitor,
};
use crate::dynamics::{
    Control, Diagnostics, Engine, EngineError, FlowSchedule, Observer, RunTrace, StepView, StopReason, SystemState,
};
use crate::graph::{min_leakage_path, shortest_path, Branch, GraphError, Path};

pub use batch::{run_batch, BatchOptions, BatchResult, BatchRow, OracleKind, Preset};
pub use export::state_to_dot;
pub use scenario::{parse_scenario, serialize_scenario, Instance, MonitorKind, Scenario};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl ExperimentError {
    pub fn config(key: &str, message: String) -> Self {
        ExperimentError::Config { key: key.into(), message }
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for ExperimentError {
    fn from(e: serde_json::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantSummary {
    pub steps_checked: u64,
    pub violation_count: u64,
    pub max_rel_error: [f64; 3],
    pub violations: Vec<InvariantViolation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundSummary {
    pub t1: f64,
    pub checked: u64,
    pub first_violation: Option<(u64, BoundCheck)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialSummary {
    /// Whether the theorem's hypotheses hold, so that the checks apply.
    pub applicable: bool,
    pub gamma: f64,
    pub final_r_min: Option<f64>,
    pub violation: Option<GrowthViolation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MonitorSummary {
    pub invariants: Option<InvariantSummary>,
    pub pheromone_bound: Option<BoundSummary>,
    pub potential: Option<PotentialSummary>,
}

impl MonitorSummary {
    pub fn violated(&self) -> bool {
        self.invariants.as_ref().is_some_and(|i| i.violation_count > 0)
            || self.pheromone_bound.as_ref().is_some_and(|b| b.first_violation.is_some())
            || self.potential.as_ref().is_some_and(|p| p.violation.is_some())
    }
}

/// Final-state JSON document of a single run.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub rule: String,
    pub delta: f64,
    pub schedule: FlowSchedule,
    pub vertices: usize,
    pub edges: usize,
    pub steps_run: u64,
    pub stop_reason: StopReason,
    pub convergence_time: Option<u64>,
    pub converged_path: Option<String>,
    pub final_path: Option<String>,
    pub oracle_path: Option<String>,
    pub planted_path: Option<String>,
    pub matches_oracle: Option<bool>,
    pub monitors: MonitorSummary,
    pub diagnostics: Diagnostics,
    pub final_state: SystemState,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub instance: Instance,
    pub trace: RunTrace,
    pub oracle: Option<Path>,
    pub monitors: MonitorSummary,
    pub files: Vec<PathBuf>,
}

impl ScenarioOutcome {
    pub fn matches_oracle(&self) -> Option<bool> {
        match (&self.trace.converged_path, &self.oracle) {
            (Some(p), Some(o)) => Some(p == o),
            (None, Some(_)) => Some(false),
            _ => None,
        }
    }

    pub fn report(&self, sc: &Scenario) -> ScenarioReport {
        let t = &self.trace;
        ScenarioReport {
            name: sc.name.clone(),
            seed: sc.seed,
            rule: self.instance.rule.label(),
            delta: self.instance.config.delta,
            schedule: self.instance.schedule,
            vertices: self.instance.graph.num_vertices(),
            edges: self.instance.graph.num_edges(),
            steps_run: t.steps_run,
            stop_reason: t.stop_reason.clone(),
            convergence_time: t.convergence_time,
            converged_path: t.converged_path.as_ref().map(Path::id),
            final_path: t.final_path.as_ref().map(Path::id),
            oracle_path: self.oracle.as_ref().map(Path::id),
            planted_path: self.instance.planted.as_ref().map(Path::id),
            matches_oracle: self.matches_oracle(),
            monitors: self.monitors.clone(),
            diagnostics: t.final_state.diagnostics.clone(),
            final_state: t.final_state.clone(),
        }
    }
}

/// The path the theory predicts: minimum leakage under fixed flow, shortest
/// under growing flow. One-way runs have no prediction.
pub fn oracle_for(inst: &Instance) -> Option<Path> {
    if inst.schedule.is_one_way() {
        return None;
    }
    match inst.schedule {
        FlowSchedule::Constant { .. } => min_leakage_path(&inst.graph),
        _ => shortest_path(&inst.graph),
    }
}

/// Time after which the pheromone bound applies.
fn bound_start(state: &SystemState, schedule: &FlowSchedule, delta: f64) -> f64 {
    let (f0, b0) = schedule.base();
    let p_max = state.pheromone.iter().copied().fold(0.0, f64::max);
    if p_max > 0.0 {
        ((p_max / (f0 + b0)).ln() / (1.0 / delta).ln()).max(0.0)
    } else {
        0.0
    }
}

struct InvariantObserver(InvariantMonitor);

impl Observer for InvariantObserver {
    fn observe(&mut self, view: &StepView<'_>) -> Control {
        self.0.check(view);
        Control::Continue
    }
}

/// Executes `sc`, writing artifacts under `out_dir` when given.
///
/// Engine aborts are returned inside the trace (see [`RunTrace::aborted`]);
/// only configuration and I/O problems are errors.
pub fn run_scenario(sc: &Scenario, out_dir: Option<&FsPath>) -> Result<ScenarioOutcome, ExperimentError> {
    let inst = sc.instantiate()?;
    let engine = Engine::new(&inst.graph, inst.rule.clone(), inst.schedule, inst.config.clone())?;
    let state = engine.init_state(&inst.init)?;
    let delta = inst.config.delta;
    let t1 = bound_start(&state, &inst.schedule, delta);

    let mut invariants =
        sc.monitors.contains(&MonitorKind::Invariants).then(|| InvariantObserver(InvariantMonitor::default()));
    let mut bound = sc.monitors.contains(&MonitorKind::PheromoneBound).then(|| PheromoneBoundMonitor::new(t1));
    let mut potential = match (&inst.two_path, sc.monitors.contains(&MonitorKind::Potential)) {
        (Some(tp), true) => Some(PotentialMonitor::new(tp)),
        _ => None,
    };
    let mut files = Vec::new();
    let mut recorder = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let series = dir.join("timeseries.csv");
            let summary = dir.join("summary.csv");
            let rec = export::CsvRecorder::create(
                sc.outputs.csv.then_some(series.as_path()),
                &summary,
                sc.outputs.snapshot_interval,
                sc.epsilon,
                inst.two_path.as_ref(),
            )?;
            if sc.outputs.csv {
                files.push(series);
            }
            files.push(summary);
            Some(rec)
        }
        None => None,
    };
    let mut dots = DotSnapshots {
        dir: out_dir.map(FsPath::to_path_buf),
        every: sc.outputs.dot_interval,
        written: Vec::new(),
        error: None,
    };

    let mut observers: Vec<&mut dyn Observer> = Vec::new();
    if let Some(o) = invariants.as_mut() {
        observers.push(o);
    }
    if let Some(o) = bound.as_mut() {
        observers.push(o);
    }
    if let Some(o) = potential.as_mut() {
        observers.push(o);
    }
    if let Some(o) = recorder.as_mut() {
        observers.push(o);
    }
    if sc.outputs.dot && dots.every.is_some() && dots.dir.is_some() {
        observers.push(&mut dots);
    }
    let trace = engine.run(state, sc.steps, &mut observers)?;
    drop(observers);

    let monitors = MonitorSummary {
        invariants: invariants.map(|InvariantObserver(m)| InvariantSummary {
            steps_checked: m.steps_checked,
            violation_count: m.violation_count,
            max_rel_error: m.max_rel_error,
            violations: m.violations,
        }),
        pheromone_bound: bound.map(|b| BoundSummary {
            t1: b.t1,
            checked: b.checked,
            first_violation: b.first_violation,
        }),
        potential: potential.map(|p| potential_summary(&inst, p, t1)),
    };
    if let Some(rec) = recorder {
        rec.finish(&trace.final_state, &engine)?;
    }
    if let Some(e) = dots.error {
        return Err(ExperimentError::Io(e));
    }
    files.extend(dots.written);
    let oracle = oracle_for(&inst);
    let mut outcome = ScenarioOutcome { instance: inst, trace, oracle, monitors, files };
    if let Some(dir) = out_dir {
        if sc.outputs.json {
            let p = dir.join("report.json");
            export::write_json(&p, &outcome.report(sc))?;
            outcome.files.push(p);
            let p = dir.join("graph.json");
            export::write_text(&p, &outcome.instance.graph.to_json())?;
            outcome.files.push(p);
        }
        if sc.outputs.dot {
            let p = dir.join("final.dot");
            export::write_text(&p, &state_to_dot(&outcome.instance.graph, &outcome.trace.final_state))?;
            outcome.files.push(p);
        }
    }
    Ok(outcome)
}

fn potential_summary(inst: &Instance, monitor: PotentialMonitor, t1: f64) -> PotentialSummary {
    let tp = inst.two_path.as_ref().expect("potential monitor implies a two-path graph");
    let (surv_top, surv_bottom) = (tp.survival(Branch::Top), tp.survival(Branch::Bottom));
    let delta = inst.config.delta;
    let (f0, b0) = inst.schedule.base();
    let (applicable, gamma) = match inst.schedule {
        _ if b0 == 0.0 => (false, 1.0),
        FlowSchedule::Constant { .. } => match theorem_constants(f0, b0, delta, surv_top, surv_bottom, 0.0) {
            Ok(c) => (true, c.gamma_l),
            Err(_) => (false, 1.0),
        },
        FlowSchedule::Exponential { .. } => {
            (surv_top == 1.0 && surv_bottom == 1.0 && tp.top().len() <= tp.bottom().len(), 1.0)
        }
        FlowSchedule::Linear { .. } => (false, 1.0),
    };
    let violation = if applicable { check_potential_growth(&monitor.trace, gamma, t1).err() } else { None };
    PotentialSummary { applicable, gamma, final_r_min: monitor.trace.latest(), violation }
}

struct DotSnapshots {
    dir: Option<PathBuf>,
    every: Option<u64>,
    written: Vec<PathBuf>,
    error: Option<String>,
}

impl Observer for DotSnapshots {
    fn observe(&mut self, view: &StepView<'_>) -> Control {
        let (Some(dir), Some(every)) = (&self.dir, self.every) else {
            return Control::Continue;
        };
        if view.t % every != 0 {
            return Control::Continue;
        }
        let p = dir.join(format!("state_{:08}.dot", view.t));
        match std::fs::write(&p, state_to_dot(view.graph(), view.current)) {
            Ok(()) => {
                self.written.push(p);
                Control::Continue
            }
            Err(e) => {
                self.error = Some(e.to_string());
                Control::Stop(format!("dot output failed: {e}"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(extra: &str) -> Scenario {
        let text = format!(
            r#"
            name = "t"
            steps = 20000
            delta = 0.5
            monitors = ["invariants", "pheromone_bound", "potential"]
            {extra}
            [graph]
            kind = "two_path"
            m = 2
            n = 3
            [leakage]
            kind = "two_path"
            top = [0.03]
            bottom = [0.05, 0.0]
            [schedule]
            kind = "constant"
            f0 = 1.0
            b0 = 1.0
            "#
        );
        parse_scenario(&text).unwrap()
    }

    #[test]
    fn converges_with_clean_monitors() {
        let out = run_scenario(&base(""), None).unwrap();
        assert_eq!(out.matches_oracle(), Some(true));
        assert!(!out.monitors.violated(), "{:?}", out.monitors);
        assert!(out.monitors.potential.as_ref().unwrap().applicable);
    }

    #[test]
    fn single_step_writes_one_row_block() {
        let dir = tempfile::tempdir().unwrap();
        let mut sc = base("");
        sc.steps = 1;
        let out = run_scenario(&sc, Some(dir.path())).unwrap();
        assert_eq!(out.trace.steps_run, 1);
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 2);
        let series = std::fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
        assert_eq!(series.lines().count(), 1 + 5);
        for f in ["report.json", "graph.json", "final.dot"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }
}
