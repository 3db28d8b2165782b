//! Synchronous update engine.
//!
//! One step, in order:
//! 1. pheromone `p(t+1) = delta * (p(t) + f(t) + b(t))` on every edge;
//! 2. vertex aggregation `f_v(t+1) = (1 - l_v) * sum of incoming f(t)` and the
//!    mirror image for backward flow; forward flow reaching d and backward
//!    flow reaching s is delivered and leaves the system;
//! 3. optional rescaling of everything stored, then injection at s and d;
//! 4. the new vertex flows are split over edges using `p(t+1)`;
//! 5. values below the underflow threshold are flushed to zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::detect_convergence;
use crate::graph::{min_leakage_path, DirectedGraph, EdgeId, Path, VertexId};
use crate::rules::{DecisionRule, RuleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("invalid flow schedule: {0}")]
    Schedule(String),
    #[error("general rule needs branching of at most two, vertex {vertex} has {degree}")]
    BranchTooWide { vertex: VertexId, degree: usize },
    #[error("rescaling requires the linear rule")]
    RescaleNeedsLinear,
    #[error("rescaling requires an exponential schedule")]
    RescaleNeedsExponential,
    #[error("state does not match the graph: {0}")]
    StateMismatch(String),
    #[error("negative or non-finite {quantity} {value} at index {index}")]
    BadValue { quantity: &'static str, index: usize, value: f64 },
    #[error("non-finite {quantity} at index {index} after step {t}")]
    NonFinite { t: u64, quantity: &'static str, index: usize },
    #[error("run length must be at least one step")]
    ZeroSteps,
    #[error(transparent)]
    Rule(#[from] RuleError),
}

/// Injection magnitudes at s (forward) and d (backward) over time.
///
/// A zero `b0` selects one-way operation: nothing is ever injected at d,
/// whatever the variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowSchedule {
    Constant {
        f0: f64,
        b0: f64,
    },
    /// `f0 * alpha^t`, `alpha > 1`.
    Exponential {
        f0: f64,
        b0: f64,
        alpha: f64,
    },
    /// `f0 + alpha * t`, `alpha > 0`.
    Linear {
        f0: f64,
        b0: f64,
        alpha: f64,
    },
}

impl FlowSchedule {
    pub fn constant(f0: f64, b0: f64) -> Self {
        FlowSchedule::Constant { f0, b0 }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let (f0, b0) = self.base();
        if !(f0.is_finite() && f0 > 0.0) {
            return Err(EngineError::Schedule(format!("f0 = {f0} must be positive")));
        }
        if !(b0.is_finite() && b0 >= 0.0) {
            return Err(EngineError::Schedule(format!("b0 = {b0} must be non-negative")));
        }
        match *self {
            FlowSchedule::Exponential { alpha, .. } if !(alpha.is_finite() && alpha > 1.0) => {
                Err(EngineError::Schedule(format!("exponential alpha = {alpha} must exceed 1")))
            }
            FlowSchedule::Linear { alpha, .. } if !(alpha.is_finite() && alpha > 0.0) => {
                Err(EngineError::Schedule(format!("linear alpha = {alpha} must be positive")))
            }
            _ => Ok(()),
        }
    }

    pub fn base(&self) -> (f64, f64) {
        match *self {
            FlowSchedule::Constant { f0, b0 }
            | FlowSchedule::Exponential { f0, b0, .. }
            | FlowSchedule::Linear { f0, b0, .. } => (f0, b0),
        }
    }

    fn at(&self, base: f64, t: u64) -> f64 {
        if base == 0.0 {
            return 0.0;
        }
        match *self {
            FlowSchedule::Constant { .. } => base,
            FlowSchedule::Exponential { alpha, .. } => base * alpha.powf(t as f64),
            FlowSchedule::Linear { alpha, .. } => base + alpha * t as f64,
        }
    }

    pub fn forward(&self, t: u64) -> f64 {
        self.at(self.base().0, t)
    }

    pub fn backward(&self, t: u64) -> f64 {
        self.at(self.base().1, t)
    }

    pub fn is_one_way(&self) -> bool {
        self.base().1 == 0.0
    }

    /// Multiplies both injection magnitudes by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        match *self {
            FlowSchedule::Constant { f0, b0 } => FlowSchedule::Constant { f0: f0 * c, b0: b0 * c },
            FlowSchedule::Exponential { f0, b0, alpha } => FlowSchedule::Exponential { f0: f0 * c, b0: b0 * c, alpha },
            FlowSchedule::Linear { f0, b0, alpha } => FlowSchedule::Linear { f0: f0 * c, b0: b0 * c, alpha: alpha * c },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    Off,
    /// Keep the injected magnitudes at their initial values and divide the
    /// rest of the state by the growth factor every step.
    NormalizeBySource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub delta: f64,
    pub underflow_threshold: f64,
    pub rescale: RescaleMode,
    /// Threshold for the convergence detector run after every step.
    pub epsilon_convergence: Option<f64>,
    pub stop_on_convergence: bool,
    /// Record a warning when the initial pheromone vanishes on the
    /// minimum-leakage path.
    pub strict: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            underflow_threshold: 1e-300,
            rescale: RescaleMode::Off,
            epsilon_convergence: Some(0.01),
            stop_on_convergence: true,
            strict: false,
        }
    }
}

impl EngineConfig {
    pub fn with_delta(delta: f64) -> Self {
        Self { delta, ..Self::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Splits that fell back to uniform because all pheromone was zero.
    pub uniform_splits: u64,
    pub flushed_values: u64,
    /// Flow absorbed by leakage or stranded at vertices without an exit.
    pub lost_forward: f64,
    pub lost_backward: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub t: u64,
    pub pheromone: Vec<f64>,
    pub f_edge: Vec<f64>,
    pub b_edge: Vec<f64>,
    pub f_vertex: Vec<f64>,
    pub b_vertex: Vec<f64>,
    pub delivered_forward: f64,
    pub delivered_backward: f64,
    pub diagnostics: Diagnostics,
}

impl SystemState {
    pub fn zeros(graph: &DirectedGraph) -> Self {
        let (n, m) = (graph.num_vertices(), graph.num_edges());
        Self {
            t: 0,
            pheromone: vec![0.0; m],
            f_edge: vec![0.0; m],
            b_edge: vec![0.0; m],
            f_vertex: vec![0.0; n],
            b_vertex: vec![0.0; n],
            delivered_forward: 0.0,
            delivered_backward: 0.0,
            diagnostics: Diagnostics::default(),
        }
    }

    /// Checks shapes against `graph` and that every value is finite and
    /// non-negative.
    pub fn validate(&self, graph: &DirectedGraph) -> Result<(), EngineError> {
        let m = graph.num_edges();
        let n = graph.num_vertices();
        for (name, len, want) in [
            ("pheromone", self.pheromone.len(), m),
            ("f_edge", self.f_edge.len(), m),
            ("b_edge", self.b_edge.len(), m),
            ("f_vertex", self.f_vertex.len(), n),
            ("b_vertex", self.b_vertex.len(), n),
        ] {
            if len != want {
                return Err(EngineError::StateMismatch(format!("{name} has {len} entries, expected {want}")));
            }
        }
        for (quantity, values) in self.arrays() {
            if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                return Err(EngineError::BadValue { quantity, index, value });
            }
        }
        Ok(())
    }

    fn arrays(&self) -> [(&'static str, &Vec<f64>); 5] {
        [
            ("pheromone", &self.pheromone),
            ("f_edge", &self.f_edge),
            ("b_edge", &self.b_edge),
            ("f_vertex", &self.f_vertex),
            ("b_vertex", &self.b_vertex),
        ]
    }

    fn arrays_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.pheromone, &mut self.f_edge, &mut self.b_edge, &mut self.f_vertex, &mut self.b_vertex]
    }

    fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        self.arrays().into_iter().find_map(|(name, v)| v.iter().position(|x| !x.is_finite()).map(|i| (name, i)))
    }

    /// Multiplies every stored magnitude by `c`.
    pub fn scale_all(&mut self, c: f64) {
        for v in self.arrays_mut() {
            v.iter_mut().for_each(|x| *x *= c);
        }
        self.delivered_forward *= c;
        self.delivered_backward *= c;
    }
}

/// Divides every pheromone, flow and delivered tally by `factor`. Normalized
/// pheromone levels are unchanged; the dynamics are only invariant under
/// this for the proportional rule.
pub fn rescale(state: &mut SystemState, factor: f64, rule: &DecisionRule) -> Result<(), EngineError> {
    if !rule.is_linear() {
        return Err(EngineError::RescaleNeedsLinear);
    }
    if !(factor.is_finite() && factor > 1.0) {
        return Err(EngineError::Config(format!("rescale factor {factor} must exceed 1")));
    }
    state.scale_all(1.0 / factor);
    Ok(())
}

/// Sets every value below `threshold` to zero and returns how many nonzero
/// values were flushed.
pub fn flush_underflow(state: &mut SystemState, threshold: f64) -> u64 {
    let mut count = 0;
    for v in state.arrays_mut() {
        for x in v.iter_mut() {
            if *x != 0.0 && *x < threshold {
                *x = 0.0;
                count += 1;
            }
        }
    }
    state.diagnostics.flushed_values += count;
    count
}

/// Initial pheromone levels.
#[derive(Debug, Clone, PartialEq)]
pub enum PheromoneInit {
    Constant(f64),
    Explicit(Vec<f64>),
    /// Independent draws from the open interval `(low, high)`.
    Uniform {
        low: f64,
        high: f64,
        seed: u64,
    },
}

impl PheromoneInit {
    pub fn materialize(&self, num_edges: usize) -> Result<Vec<f64>, EngineError> {
        let values = match self {
            PheromoneInit::Constant(c) => vec![*c; num_edges],
            PheromoneInit::Explicit(v) => {
                if v.len() != num_edges {
                    return Err(EngineError::StateMismatch(format!(
                        "{} initial pheromones for {num_edges} edges",
                        v.len()
                    )));
                }
                v.clone()
            }
            PheromoneInit::Uniform { low, high, seed } => {
                if !(low < high) {
                    return Err(EngineError::Config(format!("empty pheromone range ({low}, {high})")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..num_edges)
                    .map(|_| loop {
                        let x = rng.gen_range(*low..*high);
                        if x > *low {
                            break x;
                        }
                    })
                    .collect()
            }
        };
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(EngineError::BadValue { quantity: "pheromone", index, value });
        }
        Ok(values)
    }
}

/// Read-only view handed to observers after every step.
pub struct StepView<'a> {
    pub t: u64,
    pub prev: &'a SystemState,
    pub current: &'a SystemState,
    pub engine: &'a Engine<'a>,
    /// Factor the stored state was divided by during this step (1 if none).
    pub rescale_factor: f64,
    /// Magnitudes injected at s and d during this step, in stored units.
    pub injected_forward: f64,
    pub injected_backward: f64,
}

impl StepView<'_> {
    pub fn graph(&self) -> &DirectedGraph {
        self.engine.graph()
    }
}

pub enum Control {
    Continue,
    Stop(String),
}

pub trait Observer {
    fn start(&mut self, _state: &SystemState, _engine: &Engine<'_>) {}
    fn observe(&mut self, view: &StepView<'_>) -> Control;
}

impl<F: FnMut(&StepView<'_>) -> Control> Observer for F {
    fn observe(&mut self, view: &StepView<'_>) -> Control {
        self(view)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    Converged,
    Observer { message: String },
    Aborted { t: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTrace {
    pub steps_run: u64,
    pub stop_reason: StopReason,
    /// First time the detector reported a path, and that path.
    pub convergence_time: Option<u64>,
    pub converged_path: Option<Path>,
    /// Detector verdict on the final state.
    pub final_path: Option<Path>,
    pub final_state: SystemState,
}

impl RunTrace {
    pub fn converged(&self) -> bool {
        self.converged_path.is_some()
    }

    pub fn aborted(&self) -> bool {
        matches!(self.stop_reason, StopReason::Aborted { .. })
    }
}

/// Engine bound to one graph, rule, schedule and configuration.
pub struct Engine<'g> {
    graph: &'g DirectedGraph,
    rule: DecisionRule,
    schedule: FlowSchedule,
    cfg: EngineConfig,
    growth: Option<f64>,
}

impl<'g> Engine<'g> {
    pub fn new(
        graph: &'g DirectedGraph,
        rule: DecisionRule,
        schedule: FlowSchedule,
        cfg: EngineConfig,
    ) -> Result<Self, EngineError> {
        if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
            return Err(EngineError::Config(format!("delta = {} must lie in (0, 1)", cfg.delta)));
        }
        if !(cfg.underflow_threshold >= 0.0) {
            return Err(EngineError::Config("underflow threshold must be non-negative".into()));
        }
        if let Some(eps) = cfg.epsilon_convergence {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(EngineError::Config(format!("convergence epsilon {eps} must lie in (0, 1)")));
            }
        }
        schedule.validate()?;
        if matches!(rule, DecisionRule::General(_)) {
            for v in 0..graph.num_vertices() {
                let degree = graph.out_edges(v).len().max(graph.in_edges(v).len());
                if degree > 2 {
                    return Err(EngineError::BranchTooWide { vertex: v, degree });
                }
            }
        }
        let growth = match (cfg.rescale, schedule) {
            (RescaleMode::Off, _) => None,
            (RescaleMode::NormalizeBySource, FlowSchedule::Exponential { alpha, .. }) => {
                if !rule.is_linear() {
                    return Err(EngineError::RescaleNeedsLinear);
                }
                Some(alpha)
            }
            (RescaleMode::NormalizeBySource, _) => return Err(EngineError::RescaleNeedsExponential),
        };
        Ok(Self { graph, rule, schedule, cfg, growth })
    }

    pub fn graph(&self) -> &'g DirectedGraph {
        self.graph
    }

    pub fn rule(&self) -> &DecisionRule {
        &self.rule
    }

    pub fn schedule(&self) -> &FlowSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn rescaling(&self) -> Option<f64> {
        self.growth
    }

    /// Injection magnitudes at time `t` in stored units.
    pub fn injection(&self, t: u64) -> (f64, f64) {
        if self.growth.is_some() {
            self.schedule.base()
        } else {
            (self.schedule.forward(t), self.schedule.backward(t))
        }
    }

    /// State at t = 0: injected flow at s and d, split once by the rule.
    pub fn init_state(&self, init: &PheromoneInit) -> Result<SystemState, EngineError> {
        let g = self.graph;
        let mut state = SystemState::zeros(g);
        state.pheromone = init.materialize(g.num_edges())?;
        let (f0, b0) = self.injection(0);
        state.f_vertex[g.source()] = f0;
        state.b_vertex[g.destination()] = b0;
        self.split_all(&mut state);
        if self.cfg.strict {
            if let Some(path) = min_leakage_path(g) {
                let edges = path.edges(g).expect("oracle path is valid");
                if let Some(&e) = edges.iter().find(|&&e| state.pheromone[e] == 0.0) {
                    state.diagnostics.warnings.push(format!(
                        "initial pheromone is zero on edge {e} of the minimum-leakage path {}",
                        path.id()
                    ));
                }
            }
        }
        Ok(state)
    }

    /// Splits `amount` over `edges` in proportion to the rule. Returns true
    /// when the uniform fallback was used.
    fn split(&self, edges: &[EdgeId], p: &[f64], amount: f64, out: &mut [f64]) -> bool {
        match edges.len() {
            0 => false,
            1 => {
                out[edges[0]] = amount;
                false
            }
            k => {
                let total: f64 = edges.iter().map(|&e| p[e]).sum();
                if !(total > 0.0) {
                    for &e in edges {
                        out[e] = amount / k as f64;
                    }
                    return amount > 0.0;
                }
                match &self.rule {
                    DecisionRule::Linear => {
                        for &e in edges {
                            out[e] = amount * (p[e] / total);
                        }
                    }
                    DecisionRule::General(g) => {
                        let (e1, e2) = (edges[0], edges[1]);
                        let (lo, hi) = if p[e1] <= p[e2] { (e1, e2) } else { (e2, e1) };
                        let on_min = g.eval(p[lo] / total);
                        out[lo] = amount * on_min;
                        out[hi] = amount * (1.0 - on_min);
                    }
                }
                false
            }
        }
    }

    /// Recomputes every edge flow from the vertex flows and pheromone.
    fn split_all(&self, state: &mut SystemState) {
        let g = self.graph;
        let mut fallbacks = 0;
        let mut lost_f = 0.0;
        let mut lost_b = 0.0;
        for v in 0..g.num_vertices() {
            let out = g.out_edges(v);
            if v != g.destination() {
                if out.is_empty() {
                    lost_f += state.f_vertex[v];
                }
                fallbacks += self.split(out, &state.pheromone, state.f_vertex[v], &mut state.f_edge) as u64;
            }
            let inc = g.in_edges(v);
            if v != g.source() {
                if inc.is_empty() {
                    lost_b += state.b_vertex[v];
                }
                fallbacks += self.split(inc, &state.pheromone, state.b_vertex[v], &mut state.b_edge) as u64;
            }
        }
        state.diagnostics.uniform_splits += fallbacks;
        state.diagnostics.lost_forward += lost_f;
        state.diagnostics.lost_backward += lost_b;
    }

    /// Advances `cur` by one step, writing the result into `next`.
    pub fn step_into(&self, cur: &SystemState, next: &mut SystemState) -> Result<(), EngineError> {
        let g = self.graph;
        let delta = self.cfg.delta;
        let (s, d) = (g.source(), g.destination());
        next.t = cur.t + 1;
        next.diagnostics.clone_from(&cur.diagnostics);
        next.delivered_forward = cur.delivered_forward;
        next.delivered_backward = cur.delivered_backward;

        for e in 0..g.num_edges() {
            next.pheromone[e] = delta * (cur.pheromone[e] + cur.f_edge[e] + cur.b_edge[e]);
        }

        let mut lost_f = 0.0;
        let mut lost_b = 0.0;
        for v in 0..g.num_vertices() {
            let keep = 1.0 - g.leakage(v);
            let f_in: f64 = g.in_edges(v).iter().map(|&e| cur.f_edge[e]).sum();
            let b_in: f64 = g.out_edges(v).iter().map(|&e| cur.b_edge[e]).sum();
            next.f_vertex[v] = keep * f_in;
            next.b_vertex[v] = keep * b_in;
            lost_f += f_in - next.f_vertex[v];
            lost_b += b_in - next.b_vertex[v];
        }
        next.delivered_forward += next.f_vertex[d];
        next.f_vertex[d] = 0.0;
        next.delivered_backward += next.b_vertex[s];
        next.b_vertex[s] = 0.0;
        next.diagnostics.lost_forward += lost_f;
        next.diagnostics.lost_backward += lost_b;

        if let Some(alpha) = self.growth {
            next.pheromone.iter_mut().for_each(|x| *x /= alpha);
            next.f_vertex.iter_mut().for_each(|x| *x /= alpha);
            next.b_vertex.iter_mut().for_each(|x| *x /= alpha);
            next.delivered_forward /= alpha;
            next.delivered_backward /= alpha;
            next.diagnostics.lost_forward /= alpha;
            next.diagnostics.lost_backward /= alpha;
        }
        let (f_in, b_in) = self.injection(next.t);
        next.f_vertex[s] += f_in;
        next.b_vertex[d] += b_in;

        self.split_all(next);
        if self.cfg.underflow_threshold > 0.0 {
            flush_underflow(next, self.cfg.underflow_threshold);
        }
        if let Some((quantity, index)) = next.first_non_finite() {
            return Err(EngineError::NonFinite { t: next.t, quantity, index });
        }
        Ok(())
    }

    pub fn step(&self, state: &SystemState) -> Result<SystemState, EngineError> {
        let mut next = state.clone();
        self.step_into(state, &mut next)?;
        Ok(next)
    }

    /// Runs up to `steps` steps, calling each observer after every step.
    pub fn run(
        &self,
        state: SystemState,
        steps: u64,
        observers: &mut [&mut dyn Observer],
    ) -> Result<RunTrace, EngineError> {
        if steps == 0 {
            return Err(EngineError::ZeroSteps);
        }
        state.validate(self.graph)?;
        for obs in observers.iter_mut() {
            obs.start(&state, self);
        }
        let eps = self.cfg.epsilon_convergence;
        let mut cur = state;
        let mut next = cur.clone();
        let mut convergence_time = None;
        let mut converged_path = None;
        let mut stop_reason = StopReason::Completed;
        let mut steps_run = 0;
        if let Some(eps) = eps {
            if let Some(p) = detect_convergence(&cur, self.graph, eps) {
                convergence_time = Some(cur.t);
                converged_path = Some(p);
            }
        }
        if !(converged_path.is_some() && self.cfg.stop_on_convergence) {
            for _ in 0..steps {
                if let Err(e) = self.step_into(&cur, &mut next) {
                    let t = next.t;
                    stop_reason = StopReason::Aborted { t, message: e.to_string() };
                    std::mem::swap(&mut cur, &mut next);
                    steps_run += 1;
                    break;
                }
                steps_run += 1;
                let (fi, bi) = self.injection(next.t);
                let view = StepView {
                    t: next.t,
                    prev: &cur,
                    current: &next,
                    engine: self,
                    rescale_factor: self.growth.unwrap_or(1.0),
                    injected_forward: fi,
                    injected_backward: bi,
                };
                let mut stop = None;
                for obs in observers.iter_mut() {
                    if let Control::Stop(msg) = obs.observe(&view) {
                        stop.get_or_insert(msg);
                    }
                }
                std::mem::swap(&mut cur, &mut next);
                if let Some(message) = stop {
                    stop_reason = StopReason::Observer { message };
                    break;
                }
                if let (Some(eps), None) = (eps, &converged_path) {
                    if let Some(p) = detect_convergence(&cur, self.graph, eps) {
                        convergence_time = Some(cur.t);
                        converged_path = Some(p);
                        if self.cfg.stop_on_convergence {
                            stop_reason = StopReason::Converged;
                            break;
                        }
                    }
                }
            }
        } else {
            stop_reason = StopReason::Converged;
        }
        let final_path = eps.and_then(|e| detect_convergence(&cur, self.graph, e));
        Ok(RunTrace { steps_run, stop_reason, convergence_time, converged_path, final_path, final_state: cur })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_two_path;
    use crate::rules::RuleFunction;

    fn two_path() -> crate::graph::TwoPathGraph {
        build_two_path(2, 3, &[0.0], &[0.0, 0.0]).unwrap()
    }

    #[test]
    fn symmetric_init_splits_evenly() {
        let tp = two_path();
        let eng =
            Engine::new(tp.graph(), DecisionRule::Linear, FlowSchedule::constant(1.0, 1.0), EngineConfig::default())
                .unwrap();
        let st = eng.init_state(&PheromoneInit::Constant(1.0)).unwrap();
        for e in tp.graph().out_edges(tp.graph().source()) {
            assert_eq!(st.f_edge[*e], 0.5);
        }
    }

    #[test]
    fn one_step_by_hand() {
        let tp = two_path();
        let g = tp.graph();
        let eng = Engine::new(g, DecisionRule::Linear, FlowSchedule::constant(1.0, 1.0), EngineConfig::with_delta(0.5))
            .unwrap();
        let st = eng.init_state(&PheromoneInit::Constant(1.0)).unwrap();
        let next = eng.step(&st).unwrap();
        let e = g.edge_between(0, 2).unwrap();
        // f = 0.5 and no backward flow has reached (s, s1) yet
        assert_eq!(next.pheromone[e], 0.75);
        // the d-side edge of the top path carried b = 0.5
        let e = g.edge_between(2, 1).unwrap();
        assert_eq!(next.pheromone[e], 0.75);
        assert_eq!(next.delivered_forward, 0.0);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn tiny_amounts_split_without_subnormal_loss() {
        let tp = two_path();
        let g = tp.graph();
        let eng =
            Engine::new(g, DecisionRule::Linear, FlowSchedule::constant(1.0, 1.0), EngineConfig::default()).unwrap();
        let mut out = vec![0.0; g.num_edges()];
        let edges = g.out_edges(g.source());
        let mut p = vec![0.0; g.num_edges()];
        p[edges[0]] = 8.9e-156;
        p[edges[1]] = 3.0e-220;
        // amount * p alone would land in the subnormal range
        eng.split(edges, &p, 6.4e-158, &mut out);
        assert_eq!(out[edges[0]], 6.4e-158);
        assert!(out[edges[1]] > 0.0);
    }

    #[test]
    fn decay_without_flow() {
        let tp = two_path();
        let eng = Engine::new(
            tp.graph(),
            DecisionRule::Linear,
            FlowSchedule::constant(1.0, 1.0),
            EngineConfig::with_delta(0.3),
        )
        .unwrap();
        let mut st = SystemState::zeros(tp.graph());
        st.pheromone = vec![2.0; tp.graph().num_edges()];
        let mut next = st.clone();
        eng.step_into(&st, &mut next).unwrap();
        // flows were zero at t, so only decay acts on the pheromone
        for &p in &next.pheromone {
            assert!((p - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_absorbing_vertex_blocks_flow() {
        let tp = build_two_path(2, 3, &[1.0 - f64::EPSILON], &[0.0, 0.0]).unwrap();
        let mut g = tp.graph().clone();
        g.set_leakage(2, 1.0).unwrap();
        let eng =
            Engine::new(&g, DecisionRule::Linear, FlowSchedule::constant(1.0, 1.0), EngineConfig::default()).unwrap();
        let mut st = eng.init_state(&PheromoneInit::Constant(1.0)).unwrap();
        let beyond = g.edge_between(2, 1).unwrap();
        for _ in 0..50 {
            st = eng.step(&st).unwrap();
            assert_eq!(st.f_vertex[2], 0.0);
            assert_eq!(st.f_edge[beyond], 0.0);
        }
    }

    #[test]
    fn schedules() {
        let s = FlowSchedule::Exponential { f0: 1.0, b0: 2.0, alpha: 1.1 };
        assert!((s.forward(2) - 1.21).abs() < 1e-12);
        assert!((s.backward(1) - 2.2).abs() < 1e-12);
        let s = FlowSchedule::Linear { f0: 1.0, b0: 1.0, alpha: 0.1 };
        assert!((s.forward(10) - 2.0).abs() < 1e-12);
        let s = FlowSchedule::Linear { f0: 1.0, b0: 0.0, alpha: 0.1 };
        assert_eq!(s.backward(10), 0.0);
        assert!(FlowSchedule::Exponential { f0: 1.0, b0: 1.0, alpha: 1.0 }.validate().is_err());
        assert!(FlowSchedule::constant(0.0, 1.0).validate().is_err());
    }

    #[test]
    fn config_guards() {
        let tp = two_path();
        let g = tp.graph();
        let sq = DecisionRule::General(RuleFunction::power(2.0).unwrap());
        let exp = FlowSchedule::Exponential { f0: 1.0, b0: 1.0, alpha: 1.1 };
        let cfg = EngineConfig { rescale: RescaleMode::NormalizeBySource, ..EngineConfig::default() };
        assert!(matches!(Engine::new(g, sq.clone(), exp, cfg.clone()), Err(EngineError::RescaleNeedsLinear)));
        assert!(matches!(
            Engine::new(g, DecisionRule::Linear, FlowSchedule::constant(1.0, 1.0), cfg),
            Err(EngineError::RescaleNeedsExponential)
        ));
        assert!(Engine::new(g, DecisionRule::Linear, exp, EngineConfig::with_delta(1.0)).is_err());
        let grid = crate::graph::gen_grid(3, 3).unwrap();
        assert!(Engine::new(&grid, sq.clone(), exp, EngineConfig::default()).is_ok());
        let dense = crate::graph::gen_gnp(6, 1.0, 0).unwrap();
        assert!(matches!(
            Engine::new(&dense, sq, exp, EngineConfig::default()),
            Err(EngineError::BranchTooWide { .. })
        ));
    }

    #[test]
    fn rescale_guard_and_invariance() {
        let tp = two_path();
        let g = tp.graph();
        let eng =
            Engine::new(g, DecisionRule::Linear, FlowSchedule::constant(1.0, 1.0), EngineConfig::default()).unwrap();
        let mut st = eng.init_state(&PheromoneInit::Uniform { low: 0.0, high: 1.0, seed: 3 }).unwrap();
        st = eng.step(&st).unwrap();
        let before = crate::analysis::normalized_levels(&st, g);
        rescale(&mut st, 1.1, &DecisionRule::Linear).unwrap();
        let after = crate::analysis::normalized_levels(&st, g);
        for (a, b) in before.fwd.iter().zip(&after.fwd) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
        }
        let sq = DecisionRule::General(RuleFunction::power(2.0).unwrap());
        assert_eq!(rescale(&mut st, 1.1, &sq), Err(EngineError::RescaleNeedsLinear));
    }

    #[test]
    fn flushing() {
        let tp = two_path();
        let mut st = SystemState::zeros(tp.graph());
        st.pheromone[0] = 1e-310;
        st.pheromone[1] = 1.0;
        let copy = st.clone();
        assert_eq!(flush_underflow(&mut st, 0.0), 0);
        assert_eq!(st, copy);
        assert_eq!(flush_underflow(&mut st, 1e-300), 1);
        assert_eq!(st.pheromone[0], 0.0);
        assert_eq!(st.pheromone[1], 1.0);
    }

    #[test]
    fn run_guards_and_abort() {
        let tp = two_path();
        let g = tp.graph();
        let eng =
            Engine::new(g, DecisionRule::Linear, FlowSchedule::constant(1.0, 1.0), EngineConfig::default()).unwrap();
        let st = eng.init_state(&PheromoneInit::Constant(1.0)).unwrap();
        assert_eq!(eng.run(st.clone(), 0, &mut []).unwrap_err(), EngineError::ZeroSteps);

        let mut bad = st.clone();
        bad.f_edge[0] = f64::MAX;
        bad.pheromone[0] = f64::MAX;
        let trace = eng.run(bad, 10, &mut []).unwrap();
        assert!(matches!(trace.stop_reason, StopReason::Aborted { t: 1, .. }), "{:?}", trace.stop_reason);

        let mut nan = st;
        nan.pheromone[0] = f64::NAN;
        assert!(matches!(eng.run(nan, 10, &mut []), Err(EngineError::BadValue { .. })));
    }

    #[test]
    fn strict_mode_warns_on_zero_target_pheromone() {
        let tp = build_two_path(2, 3, &[0.03], &[0.05, 0.0]).unwrap();
        let g = tp.graph();
        let cfg = EngineConfig { strict: true, ..EngineConfig::default() };
        let eng = Engine::new(g, DecisionRule::Linear, FlowSchedule::constant(1.0, 1.0), cfg).unwrap();
        let mut p = vec![1.0; g.num_edges()];
        p[tp.source_edge(crate::graph::Branch::Top)] = 0.0;
        let st = eng.init_state(&PheromoneInit::Explicit(p)).unwrap();
        assert_eq!(st.diagnostics.warnings.len(), 1);
    }

    #[test]
    fn uniform_init_is_open_interval() {
        let p = PheromoneInit::Uniform { low: 0.0, high: 1.0, seed: 9 }.materialize(1000).unwrap();
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        assert_eq!(p, PheromoneInit::Uniform { low: 0.0, high: 1.0, seed: 9 }.materialize(1000).unwrap());
        assert!(PheromoneInit::Explicit(vec![-1.0]).materialize(1).is_err());
    }
}
