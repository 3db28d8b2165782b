//! Equilibrium states of general rules on two-path graphs and perturbation
//! experiments around them.
//!
//! With zero leakage and fixed injections, a fixed point `r` of `g` yields a
//! steady state in which the top path carries the fraction `r` of both flows
//! and every top edge holds pheromone `delta / (1 - delta) * (f_s + b_d) * r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{backward_level, forward_level};
use crate::dynamics::{Control, Engine, EngineConfig, EngineError, FlowSchedule, Observer, StepView, SystemState};
use crate::graph::{build_two_path, Branch, DirectedGraph, EdgeId, GraphError, TwoPathGraph};
use crate::rules::{DecisionRule, RuleFunction};

/// Largest `|g(r) - r|` accepted for an equilibrium.
pub const FIXED_POINT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("{r} is not a fixed point of the rule (g(r) - r = {gap:e})")]
    NotFixed { r: f64, gap: f64 },
    #[error("equilibria need zero leakage, vertex {0} leaks")]
    Leaky(usize),
    #[error("r = {0} outside [0, 1/2]")]
    OutOfRange(f64),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquilibriumSpec {
    pub r: f64,
    pub f_s: f64,
    pub b_d: f64,
    pub delta: f64,
}

impl EquilibriumSpec {
    fn scale(&self) -> f64 {
        self.delta / (1.0 - self.delta) * (self.f_s + self.b_d)
    }

    fn share(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Top => self.r,
            Branch::Bottom => 1.0 - self.r,
        }
    }

    pub fn pheromone(&self, branch: Branch) -> f64 {
        self.scale() * self.share(branch)
    }

    /// `(forward, backward)` flow on every edge of `branch`.
    pub fn flows(&self, branch: Branch) -> (f64, f64) {
        let w = self.share(branch);
        (self.f_s * w, self.b_d * w)
    }
}

/// Builds the steady state of `rule` at fixed point `r`.
pub fn equilibrium_state(
    two_path: &TwoPathGraph,
    rule: &RuleFunction,
    spec: EquilibriumSpec,
) -> Result<SystemState, EquilibriumError> {
    let g = two_path.graph();
    if !(0.0..=0.5).contains(&spec.r) {
        return Err(EquilibriumError::OutOfRange(spec.r));
    }
    if let Some(v) = (0..g.num_vertices()).find(|&v| g.leakage(v) != 0.0) {
        return Err(EquilibriumError::Leaky(v));
    }
    let gap = rule.gap(spec.r);
    if gap.abs() > FIXED_POINT_TOL {
        return Err(EquilibriumError::NotFixed { r: spec.r, gap });
    }
    if !(spec.delta > 0.0 && spec.delta < 1.0 && spec.f_s > 0.0 && spec.b_d > 0.0) {
        return Err(EquilibriumError::Parameter("need 0 < delta < 1 and positive flows".into()));
    }
    let mut st = SystemState::zeros(g);
    for branch in [Branch::Top, Branch::Bottom] {
        let p = spec.pheromone(branch);
        let (f, b) = spec.flows(branch);
        for e in two_path.branch_edges(branch) {
            st.pheromone[e] = p;
            st.f_edge[e] = f;
            st.b_edge[e] = b;
        }
        for &v in two_path.path(branch).interior() {
            st.f_vertex[v] = f;
            st.b_vertex[v] = b;
        }
    }
    st.f_vertex[g.source()] = spec.f_s;
    st.b_vertex[g.destination()] = spec.b_d;
    Ok(st)
}

fn equilibrium_engine<'g>(
    graph: &'g DirectedGraph,
    rule: &RuleFunction,
    spec: EquilibriumSpec,
) -> Result<Engine<'g>, EngineError> {
    let cfg = EngineConfig { delta: spec.delta, epsilon_convergence: None, ..EngineConfig::default() };
    Engine::new(graph, DecisionRule::from(rule.clone()), FlowSchedule::constant(spec.f_s, spec.b_d), cfg)
}

fn max_abs_diff(a: &SystemState, b: &SystemState) -> f64 {
    let pairs = [
        (&a.pheromone, &b.pheromone),
        (&a.f_edge, &b.f_edge),
        (&a.b_edge, &b.b_edge),
        (&a.f_vertex, &b.f_vertex),
        (&a.b_vertex, &b.b_vertex),
    ];
    pairs.iter().flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

/// Runs `k` steps from `state` and returns the largest absolute deviation of
/// any pheromone or flow from its starting value.
pub fn verify_equilibrium(state: &SystemState, engine: &Engine<'_>, k: u64) -> Result<f64, EngineError> {
    let mut cur = state.clone();
    let mut next = state.clone();
    let mut drift: f64 = 0.0;
    for _ in 0..k {
        engine.step_into(&cur, &mut next)?;
        drift = drift.max(max_abs_diff(&next, state));
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(drift)
}

/// Convenience wrapper: builds the equilibrium on `two_path` and verifies it.
pub fn equilibrium_drift(
    two_path: &TwoPathGraph,
    rule: &RuleFunction,
    spec: EquilibriumSpec,
    k: u64,
) -> Result<f64, EquilibriumError> {
    let st = equilibrium_state(two_path, rule, spec)?;
    let eng = equilibrium_engine(two_path.graph(), rule, spec)?;
    Ok(verify_equilibrium(&st, &eng, k)?)
}

/// Adds independent uniform noise from `[-magnitude, magnitude]` to every
/// pheromone and edge flow, clamping at zero. Vertex flows are then rebuilt
/// as the sums of the edge flows leaving them (backward: entering them).
/// Returns the state and whether any value was clamped.
pub fn perturb(state: &SystemState, graph: &DirectedGraph, magnitude: f64, seed: u64) -> (SystemState, bool) {
    assert!(magnitude >= 0.0, "perturbation magnitude must be non-negative");
    let mut out = state.clone();
    if magnitude == 0.0 {
        return (out, false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clamped = false;
    for v in [&mut out.pheromone, &mut out.f_edge, &mut out.b_edge] {
        for x in v.iter_mut() {
            let y = *x + rng.gen_range(-magnitude..=magnitude);
            if y < 0.0 {
                clamped = true;
            }
            *x = y.max(0.0);
        }
    }
    for v in 0..graph.num_vertices() {
        if v != graph.destination() && !graph.out_edges(v).is_empty() {
            out.f_vertex[v] = graph.out_edges(v).iter().map(|&e| out.f_edge[e]).sum();
        }
        if v != graph.source() && !graph.in_edges(v).is_empty() {
            out.b_vertex[v] = graph.in_edges(v).iter().map(|&e| out.b_edge[e]).sum();
        }
    }
    (out, clamped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityParams {
    pub m: usize,
    pub n: usize,
    pub f_s: f64,
    pub b_d: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for StabilityParams {
    fn default() -> Self {
        Self { m: 2, n: 3, f_s: 1.0, b_d: 1.0, delta: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub rule: String,
    pub r: f64,
    pub eps: f64,
    pub eps_target: f64,
    /// First time the state was within `eps_target` of the equilibrium.
    pub t_converged: Option<u64>,
    #[serde(rename = "held_until_Tmax")]
    pub held_until_tmax: bool,
    pub max_drift_series_path: Option<String>,
    #[serde(skip)]
    pub drift_series: Vec<f64>,
    pub clamped: bool,
}

/// Distance to the equilibrium: branch normalized levels at s and d, plus
/// forward and backward flow on every edge.
struct DriftTracker {
    branch_edges: Vec<(EdgeId, bool)>,
    reference: SystemState,
    ref_levels: Vec<f64>,
    series: Vec<f64>,
}

impl DriftTracker {
    fn new(two_path: &TwoPathGraph, reference: SystemState) -> Self {
        let g = two_path.graph();
        let branch_edges: Vec<(EdgeId, bool)> = [Branch::Top, Branch::Bottom]
            .into_iter()
            .flat_map(|b| [(two_path.source_edge(b), true), (two_path.destination_edge(b), false)])
            .collect();
        let ref_levels = branch_edges.iter().map(|&(e, fwd)| Self::level(&reference, g, e, fwd)).collect();
        Self { branch_edges, reference, ref_levels, series: Vec::new() }
    }

    fn level(state: &SystemState, g: &DirectedGraph, e: EdgeId, fwd: bool) -> f64 {
        let lv = if fwd { forward_level(state, g, e) } else { backward_level(state, g, e) };
        lv.unwrap_or(0.5)
    }

    fn distance(&self, state: &SystemState, g: &DirectedGraph) -> f64 {
        let levels = self
            .branch_edges
            .iter()
            .zip(&self.ref_levels)
            .map(|(&(e, fwd), &r)| (Self::level(state, g, e, fwd) - r).abs());
        let flows = state
            .f_edge
            .iter()
            .zip(&self.reference.f_edge)
            .chain(state.b_edge.iter().zip(&self.reference.b_edge))
            .map(|(a, b)| (a - b).abs());
        levels.chain(flows).fold(0.0, f64::max)
    }
}

impl Observer for DriftTracker {
    fn start(&mut self, state: &SystemState, engine: &Engine<'_>) {
        let d = self.distance(state, engine.graph());
        self.series.push(d);
    }

    fn observe(&mut self, view: &StepView<'_>) -> Control {
        let d = self.distance(view.current, view.graph());
        self.series.push(d);
        Control::Continue
    }
}

/// Perturbs the equilibrium at `r` by `eps` and tracks the return toward it
/// for `t_max` steps.
pub fn stability_experiment(
    rule: &RuleFunction,
    r: f64,
    eps: f64,
    eps_target: f64,
    t_max: u64,
    params: StabilityParams,
) -> Result<StabilityReport, EquilibriumError> {
    let (m, n) = (params.m, params.n);
    let tp = build_two_path(m, n, &vec![0.0; m - 1], &vec![0.0; n - 1])?;
    let spec = EquilibriumSpec { r, f_s: params.f_s, b_d: params.b_d, delta: params.delta };
    let eq = equilibrium_state(&tp, rule, spec)?;
    let eng = equilibrium_engine(tp.graph(), rule, spec)?;
    let (start, clamped) = perturb(&eq, tp.graph(), eps, params.seed);
    let mut tracker = DriftTracker::new(&tp, eq);
    eng.run(start, t_max.max(1), &mut [&mut tracker])?;
    let series = tracker.series;
    let t_converged = series.iter().position(|&d| d <= eps_target);
    let held_until_tmax = t_converged.is_some_and(|t0| series[t0..].iter().all(|&d| d <= eps_target));
    Ok(StabilityReport {
        rule: rule.label(),
        r,
        eps,
        eps_target,
        t_converged: t_converged.map(|t| t as u64),
        held_until_tmax,
        max_drift_series_path: None,
        drift_series: series,
        clamped,
    })
}
