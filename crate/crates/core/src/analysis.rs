//! Normalized pheromone, convergence detection, the ratio potential on
//! two-path graphs, explicit proof constants, and per-step invariant monitors.

use std::collections::VecDeque;

use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{Control, Engine, Observer, StepView, SystemState};
use crate::graph::{Branch, DirectedGraph, EdgeId, Path, TwoPathGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid constant inputs: {0}")]
    Precondition(String),
}

/// Per-edge normalized pheromone. `None` marks an edge whose normalizing
/// total is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLevels {
    /// `p_uv / sum of p over out-edges of u`.
    pub fwd: Vec<Option<f64>>,
    /// `p_uv / sum of p over in-edges of v`.
    pub bwd: Vec<Option<f64>>,
}

fn ratio_over(p: &[f64], e: EdgeId, group: &[EdgeId]) -> Option<f64> {
    let total: f64 = group.iter().map(|&x| p[x]).sum();
    (total > 0.0).then(|| p[e] / total)
}

pub fn normalized_levels(state: &SystemState, graph: &DirectedGraph) -> NormalizedLevels {
    let p = &state.pheromone;
    let (fwd, bwd) = graph
        .edges()
        .iter()
        .enumerate()
        .map(|(e, &(u, v))| (ratio_over(p, e, graph.out_edges(u)), ratio_over(p, e, graph.in_edges(v))))
        .unzip();
    NormalizedLevels { fwd, bwd }
}

/// Forward normalized level of a single edge.
pub fn forward_level(state: &SystemState, graph: &DirectedGraph, e: EdgeId) -> Option<f64> {
    ratio_over(&state.pheromone, e, graph.out_edges(graph.endpoints(e).0))
}

/// Backward normalized level of a single edge.
pub fn backward_level(state: &SystemState, graph: &DirectedGraph, e: EdgeId) -> Option<f64> {
    ratio_over(&state.pheromone, e, graph.in_edges(graph.endpoints(e).1))
}

/// Follows the heaviest out-edge from s and returns the s→d chain if every
/// edge on it has forward and backward normalized level at least `1 - epsilon`.
pub fn detect_convergence(state: &SystemState, graph: &DirectedGraph, epsilon: f64) -> Option<Path> {
    let bar = 1.0 - epsilon;
    let p = &state.pheromone;
    let mut visited = vec![false; graph.num_vertices()];
    let mut u = graph.source();
    visited[u] = true;
    let mut seq = vec![u];
    while u != graph.destination() {
        let out = graph.out_edges(u);
        let &e = out
            .iter()
            .max_by(|&&a, &&b| p[a].total_cmp(&p[b]).then(graph.endpoints(b).1.cmp(&graph.endpoints(a).1)))?;
        if ratio_over(p, e, out)? < bar {
            return None;
        }
        let v = graph.endpoints(e).1;
        if ratio_over(p, e, graph.in_edges(v))? < bar || visited[v] {
            return None;
        }
        visited[v] = true;
        seq.push(v);
        u = v;
    }
    Some(Path::new(seq))
}

/// `num / den`, with `x / 0 = +inf` for `x > 0` and `0 / 0` undefined.
fn potential_ratio(num: f64, den: f64) -> Option<f64> {
    if den > 0.0 {
        Some(num / den)
    } else if num > 0.0 {
        Some(f64::INFINITY)
    } else {
        None
    }
}

/// Sliding-window minimum of the branch pheromone ratios at s and at d.
#[derive(Debug, Clone)]
pub struct PotentialTrace {
    window: usize,
    edges: Option<[EdgeId; 4]>,
    ss1: VecDeque<Option<f64>>,
    d1d: VecDeque<Option<f64>>,
    /// `(t, r_min(t))`; `r_min` is `None` until the window has filled or when
    /// every ratio in it is undefined.
    pub series: Vec<(u64, Option<f64>)>,
}

impl PotentialTrace {
    pub fn new(two_path: &TwoPathGraph) -> Self {
        let mut trace = Self::with_window(two_path.max_len());
        trace.edges = Some([
            two_path.source_edge(Branch::Top),
            two_path.source_edge(Branch::Bottom),
            two_path.destination_edge(Branch::Top),
            two_path.destination_edge(Branch::Bottom),
        ]);
        trace
    }

    /// A trace fed directly through [`PotentialTrace::push_ratios`].
    pub fn with_window(window: usize) -> Self {
        assert!(window >= 1);
        Self { window, edges: None, ss1: VecDeque::new(), d1d: VecDeque::new(), series: Vec::new() }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn push_ratios(&mut self, t: u64, ss1: Option<f64>, d1d: Option<f64>) -> Option<f64> {
        self.ss1.push_back(ss1);
        self.d1d.push_back(d1d);
        if self.ss1.len() > self.window {
            self.ss1.pop_front();
            self.d1d.pop_front();
        }
        let r_min = if self.ss1.len() == self.window {
            self.ss1.iter().chain(&self.d1d).flatten().copied().reduce(f64::min)
        } else {
            None
        };
        self.series.push((t, r_min));
        r_min
    }

    /// Records the ratios of `state`.
    pub fn update(&mut self, state: &SystemState) -> Option<f64> {
        let [top_s, bot_s, top_d, bot_d] = self.edges.expect("trace is bound to a two-path graph");
        let p = &state.pheromone;
        self.push_ratios(state.t, potential_ratio(p[top_s], p[bot_s]), potential_ratio(p[top_d], p[bot_d]))
    }

    pub fn latest(&self) -> Option<f64> {
        self.series.last().and_then(|x| x.1)
    }
}

/// Updates `trace` with `state`.
pub fn update_potential(trace: &mut PotentialTrace, state: &SystemState) -> Option<f64> {
    trace.update(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremConstants {
    /// `5 (f_s + b_d) / (b_d (1 - delta))`.
    pub c: f64,
    /// The same with `f_s` in the denominator, used at the d side.
    pub c_dest: f64,
    pub gamma_sl: f64,
    pub gamma_dl: f64,
    pub gamma_l: f64,
    pub t1: f64,
    pub surv_top: f64,
    pub surv_bottom: f64,
}

/// Explicit constants of the fixed-flow convergence argument.
pub fn theorem_constants(
    f_s: f64,
    b_d: f64,
    delta: f64,
    surv_top: f64,
    surv_bottom: f64,
    p_init_max: f64,
) -> Result<TheoremConstants, AnalysisError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AnalysisError::Precondition(format!("delta = {delta} outside (0, 1)")));
    }
    if !(f_s > 0.0 && b_d > 0.0) {
        return Err(AnalysisError::Precondition("flows must be positive".into()));
    }
    if !(surv_top >= surv_bottom && surv_bottom >= 0.0 && surv_top <= 1.0) {
        return Err(AnalysisError::Precondition(format!(
            "survival factors {surv_top}, {surv_bottom} must satisfy 1 >= top >= bottom >= 0"
        )));
    }
    if !(p_init_max >= 0.0) {
        return Err(AnalysisError::Precondition("initial pheromone must be non-negative".into()));
    }
    let total = f_s + b_d;
    let c = 5.0 * total / (b_d * (1.0 - delta));
    let c_dest = 5.0 * total / (f_s * (1.0 - delta));
    let diff = surv_top - surv_bottom;
    let gamma_sl = 1.0 + diff / (c + surv_bottom);
    let gamma_dl = 1.0 + diff / (c_dest + surv_bottom);
    let t1 = if p_init_max > 0.0 { ((p_init_max / total).ln() / (1.0 / delta).ln()).max(0.0) } else { 0.0 };
    Ok(TheoremConstants { c, c_dest, gamma_sl, gamma_dl, gamma_l: gamma_sl.min(gamma_dl), t1, surv_top, surv_bottom })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BoundCheck {
    NotApplicable,
    Ok,
    Violation { edge: EdgeId, value: f64, bound: f64 },
}

/// Checks `p_e <= 2 (f_s(t) + b_d(t)) / (1 - delta)` on every edge once
/// `state.t >= t1`, with `1e-9` absolute slack.
pub fn check_pheromone_bound(state: &SystemState, f_s_t: f64, b_d_t: f64, delta: f64, t1: f64) -> BoundCheck {
    if (state.t as f64) < t1 {
        return BoundCheck::NotApplicable;
    }
    let bound = 2.0 * (f_s_t + b_d_t) / (1.0 - delta);
    match state.pheromone.iter().enumerate().find(|(_, &p)| p > bound + 1e-9) {
        Some((edge, &value)) => BoundCheck::Violation { edge, value, bound },
        None => BoundCheck::Ok,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthCheck {
    Monotone,
    Growth,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthViolation {
    pub kind: GrowthCheck,
    pub t: u64,
    pub before: f64,
    pub after: f64,
    pub required: f64,
}

/// Checks that `r_min` never decreases for `t >= L` (relative slack `1e-12`)
/// and that `r_min(t + L) >= gamma * r_min(t) * (1 - 1e-9)` for `t >= t1 + L`.
/// Pass `gamma = 1` to check monotonicity alone.
pub fn check_potential_growth(trace: &PotentialTrace, gamma: f64, t1: f64) -> Result<(), GrowthViolation> {
    let l = trace.window() as u64;
    let series = &trace.series;
    for w in series.windows(2) {
        let ((t, a), (_, b)) = (w[0], w[1]);
        if t < l {
            continue;
        }
        if let (Some(a), Some(b)) = (a, b) {
            let required = a * (1.0 - 1e-12);
            if !(b >= required) {
                return Err(GrowthViolation { kind: GrowthCheck::Monotone, t, before: a, after: b, required });
            }
        }
    }
    let start = (t1.ceil() as u64).saturating_add(l);
    for (i, &(t, a)) in series.iter().enumerate() {
        if t < start {
            continue;
        }
        let Some(&(_, b)) = series.get(i + l as usize) else {
            break;
        };
        if let (Some(a), Some(b)) = (a, b) {
            let required = gamma * a * (1.0 - 1e-9);
            if !(b >= required) {
                return Err(GrowthViolation { kind: GrowthCheck::Growth, t, before: a, after: b, required });
            }
        }
    }
    Ok(())
}

/// Records the potential after every step.
pub struct PotentialMonitor {
    pub trace: PotentialTrace,
}

impl PotentialMonitor {
    pub fn new(two_path: &TwoPathGraph) -> Self {
        Self { trace: PotentialTrace::new(two_path) }
    }
}

impl Observer for PotentialMonitor {
    fn start(&mut self, state: &SystemState, _engine: &Engine<'_>) {
        self.trace.update(state);
    }

    fn observe(&mut self, view: &StepView<'_>) -> Control {
        self.trace.update(view.current);
        Control::Continue
    }
}

/// Checks the pheromone bound after every step.
pub struct PheromoneBoundMonitor {
    pub t1: f64,
    pub checked: u64,
    pub first_violation: Option<(u64, BoundCheck)>,
}

impl PheromoneBoundMonitor {
    pub fn new(t1: f64) -> Self {
        Self { t1, checked: 0, first_violation: None }
    }
}

impl Observer for PheromoneBoundMonitor {
    fn observe(&mut self, view: &StepView<'_>) -> Control {
        let delta = view.engine.config().delta;
        let check = check_pheromone_bound(view.current, view.injected_forward, view.injected_backward, delta, self.t1);
        match check {
            BoundCheck::NotApplicable => {}
            BoundCheck::Ok => self.checked += 1,
            BoundCheck::Violation { .. } => {
                self.checked += 1;
                self.first_violation.get_or_insert((view.t, check));
            }
        }
        Control::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantKind {
    PheromoneRecurrence,
    FlowConservation,
    SplitConsistency,
    NonNegativity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantViolation {
    pub kind: InvariantKind,
    pub t: u64,
    pub index: usize,
    pub expected: f64,
    pub actual: f64,
}

/// Verifies the update equations on every step: pheromone recurrence on every
/// edge, flow conservation at interior vertices, and that edge flows add up
/// to the vertex flow they were split from.
///
/// Tolerance is `rel_tol` relative plus the underflow threshold times the
/// number of terms involved, so flushed values do not count as violations.
pub struct InvariantMonitor {
    pub rel_tol: f64,
    pub steps_checked: u64,
    pub violations: Vec<InvariantViolation>,
    pub violation_count: u64,
    /// Largest relative discrepancy seen per kind: recurrence, conservation, split.
    pub max_rel_error: [f64; 3],
}

const MAX_RECORDED: usize = 16;

impl Default for InvariantMonitor {
    fn default() -> Self {
        Self::new(1e-12)
    }
}

impl InvariantMonitor {
    pub fn new(rel_tol: f64) -> Self {
        Self { rel_tol, steps_checked: 0, violations: Vec::new(), violation_count: 0, max_rel_error: [0.0; 3] }
    }

    pub fn ok(&self) -> bool {
        self.violation_count == 0
    }

    fn compare(&mut self, kind: InvariantKind, t: u64, index: usize, expected: f64, actual: f64, abs: f64) {
        let diff = (expected - actual).abs();
        let scale = expected.abs().max(actual.abs());
        let slot = match kind {
            InvariantKind::PheromoneRecurrence => 0,
            InvariantKind::FlowConservation => 1,
            _ => 2,
        };
        if scale > abs {
            self.max_rel_error[slot] = self.max_rel_error[slot].max(diff / scale);
        }
        if !(diff <= self.rel_tol * scale + abs) {
            self.record(InvariantViolation { kind, t, index, expected, actual });
        }
    }

    fn record(&mut self, v: InvariantViolation) {
        self.violation_count += 1;
        if self.violations.len() < MAX_RECORDED {
            self.violations.push(v);
        }
    }

    pub fn check(&mut self, view: &StepView<'_>) {
        let g = view.graph();
        let (prev, cur) = (view.prev, view.current);
        let phi = view.rescale_factor;
        let theta = view.engine.config().underflow_threshold;
        let delta = view.engine.config().delta;
        let t = view.t;
        let (s, d) = (g.source(), g.destination());

        for e in 0..g.num_edges() {
            let expected = delta * (prev.pheromone[e] + prev.f_edge[e] + prev.b_edge[e]);
            self.compare(InvariantKind::PheromoneRecurrence, t, e, expected, cur.pheromone[e] * phi, theta * phi);
        }
        for v in 0..g.num_vertices() {
            let inc = g.in_edges(v);
            let out = g.out_edges(v);
            if v != s && v != d {
                let keep = 1.0 - g.leakage(v);
                let f_in = keep * inc.iter().map(|&e| prev.f_edge[e]).sum::<f64>();
                let b_in = keep * out.iter().map(|&e| prev.b_edge[e]).sum::<f64>();
                let abs = theta * phi * (inc.len() + 1) as f64;
                self.compare(InvariantKind::FlowConservation, t, v, f_in, cur.f_vertex[v] * phi, abs);
                let abs = theta * phi * (out.len() + 1) as f64;
                self.compare(InvariantKind::FlowConservation, t, v, b_in, cur.b_vertex[v] * phi, abs);
            }
            if v != d && !out.is_empty() {
                let sum: f64 = out.iter().map(|&e| cur.f_edge[e]).sum();
                self.compare(
                    InvariantKind::SplitConsistency,
                    t,
                    v,
                    cur.f_vertex[v],
                    sum,
                    theta * (out.len() + 1) as f64,
                );
            }
            if v != s && !inc.is_empty() {
                let sum: f64 = inc.iter().map(|&e| cur.b_edge[e]).sum();
                self.compare(
                    InvariantKind::SplitConsistency,
                    t,
                    v,
                    cur.b_vertex[v],
                    sum,
                    theta * (inc.len() + 1) as f64,
                );
            }
        }
        let negative = [&cur.pheromone, &cur.f_edge, &cur.b_edge, &cur.f_vertex, &cur.b_vertex]
            .into_iter()
            .flat_map(|v| v.iter().enumerate())
            .find(|(_, &x)| x < 0.0)
            .map(|(i, &x)| (i, x));
        if let Some((index, actual)) = negative {
            self.record(InvariantViolation { kind: InvariantKind::NonNegativity, t, index, expected: 0.0, actual });
        }
        self.steps_checked += 1;
    }
}

impl Observer for InvariantMonitor {
    fn observe(&mut self, view: &StepView<'_>) -> Control {
        self.check(view);
        Control::Continue
    }
}
