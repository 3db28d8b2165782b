//! Constructions on which rules other than the proportional one fail.
//!
//! * leakage: a two-path graph whose survival factors are close enough that a
//!   rule pulling the split below the diagonal keeps the better branch pinned
//!   under `r + eps` forever;
//! * growing flow: the same effect with zero leakage and injections growing by
//!   a fixed factor per step, which penalizes the longer round trip;
//! * one-way flow: without backward flow the choice at `s` never sees the rest
//!   of the graph, so swapping its two initial pheromones swaps the outcome.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{backward_level, detect_convergence, forward_level};
use crate::dynamics::{
    Control, Engine, EngineConfig, EngineError, FlowSchedule, Observer, StepView, StopReason, SystemState,
};
use crate::graph::{Branch, GraphError, Path, TwoPathGraph};
use crate::rules::{grid_points, DecisionRule, RuleFunction};

/// Largest `|g - id|` on the grid below which a rule counts as linear.
pub const LINEAR_TOL: f64 = 1e-8;
/// Slack allowed on every bound of the induction invariant.
pub const BOUND_SLACK: f64 = 1e-9;
/// Fraction of the admissible room used when choosing free parameters.
pub const MARGIN: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversarialError {
    #[error("rule is linear at grid resolution")]
    LinearAtResolution,
    #[error("no consistent sign of g - id to the right of r = {0}")]
    NoConsistentSign(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

type Result<T> = std::result::Result<T, AdversarialError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// `g(x) < x` just right of `r`.
    BelowDiagonal,
    /// `g(x) > x` just right of `r`.
    AboveDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AtMost,
    AtLeast,
}

impl Direction {
    fn holds(self, value: f64, bound: f64) -> bool {
        match self {
            Direction::AtMost => value <= bound + BOUND_SLACK,
            Direction::AtLeast => value >= bound - BOUND_SLACK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Nonlinearity {
    pub r: f64,
    pub eps: f64,
    /// Grid-certified limit: the sign of `g - id` is constant on `(r, r + s]`
    /// for every grid-resolved `s < eps_max`.
    pub eps_max: f64,
    pub case: Case,
    pub c_eps: f64,
    pub c_g: f64,
}

/// Locates a point where `rule` departs from the identity and an interval to
/// its right on which the departure keeps one sign.
///
/// By default `r` maximizes `|g - id|` over interior grid points and `eps` is
/// 40% of the certified extent. Either may be fixed by the caller.
pub fn find_nonlinearity(rule: &RuleFunction, grid: usize, r: Option<f64>, eps: Option<f64>) -> Result<Nonlinearity> {
    let xs = grid_points(grid.max(64));
    if xs.iter().all(|&x| rule.gap(x).abs() <= LINEAR_TOL) {
        return Err(AdversarialError::LinearAtResolution);
    }
    let r = match r {
        Some(r) if r > 0.0 && r < 0.5 => r,
        Some(r) => return Err(AdversarialError::Precondition(format!("r = {r} must lie in (0, 1/2)"))),
        None => {
            let mut best = (0.0, 0.0);
            for &x in &xs[1..xs.len() - 1] {
                let h = rule.gap(x).abs();
                if h > best.1 {
                    best = (x, h);
                }
            }
            best.0
        }
    };
    let h_r = rule.gap(r);
    if h_r.abs() <= LINEAR_TOL {
        return Err(AdversarialError::Precondition(format!("g(r) = r at r = {r}")));
    }
    let case = if h_r < 0.0 { Case::BelowDiagonal } else { Case::AboveDiagonal };
    let consistent = |x: f64| {
        let h = rule.gap(x);
        match case {
            Case::BelowDiagonal => h < -LINEAR_TOL,
            Case::AboveDiagonal => h > LINEAR_TOL,
        }
    };
    let mut eps_max = 0.5 - r;
    for &x in xs.iter().filter(|&&x| x > r) {
        if !consistent(x) {
            eps_max = x - r;
            break;
        }
    }
    if eps_max <= 0.0 {
        return Err(AdversarialError::NoConsistentSign(r));
    }
    let eps = match eps {
        Some(e) if e > 0.0 && e < eps_max && r + e < 0.5 => e,
        Some(e) => return Err(AdversarialError::Precondition(format!("eps = {e} not certified (limit {eps_max})"))),
        None => 0.4 * eps_max,
    };
    let q = r + eps;
    let c_eps = match case {
        Case::BelowDiagonal => q - rule.eval(q),
        Case::AboveDiagonal => rule.eval(q) - q,
    };
    if c_eps <= 0.0 {
        return Err(AdversarialError::NoConsistentSign(r));
    }
    Ok(Nonlinearity { r, eps, eps_max, case, c_eps, c_g: c_eps / 4.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Constraint {
    pub description: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterexampleKind {
    Leakage,
    GrowingFlow,
}

/// A fully specified scenario together with the invariant it should keep.
#[derive(Debug, Clone)]
pub struct Counterexample {
    pub kind: CounterexampleKind,
    pub rule: RuleFunction,
    pub nonlinearity: Nonlinearity,
    pub two_path: TwoPathGraph,
    pub schedule: FlowSchedule,
    pub delta: f64,
    pub initial_state: SystemState,
    /// Branch whose normalized level is bounded, and how.
    pub target: Branch,
    pub direction: Direction,
    pub bound: f64,
    pub constraint: Constraint,
}

impl Counterexample {
    /// Normalized share of `branch` inside the invariant.
    fn level(&self, branch: Branch) -> f64 {
        let q = self.nonlinearity.r + self.nonlinearity.eps;
        let top = match self.nonlinearity.case {
            Case::BelowDiagonal => q,
            Case::AboveDiagonal => 1.0 - q,
        };
        match branch {
            Branch::Top => top,
            Branch::Bottom => 1.0 - top,
        }
    }

    /// Bounds on the forward and backward flow of the `i`-th edge of `branch`
    /// at time `t`. Top edges are bounded above and bottom edges below.
    pub fn flow_bounds(&self, branch: Branch, i: usize, t: u64) -> (f64, f64) {
        let g = self.two_path.graph();
        let path = self.two_path.path(branch);
        let interior = path.interior();
        let len = path.len();
        let lvl = self.level(branch);
        let prefix: f64 = interior[..i].iter().map(|&v| 1.0 - g.leakage(v)).product();
        let suffix: f64 = interior[i..].iter().map(|&v| 1.0 - g.leakage(v)).product();
        let f = self.schedule.forward(t.saturating_sub(i as u64));
        let b = self.schedule.backward(t.saturating_sub((len - 1 - i) as u64));
        (f * lvl * prefix, b * lvl * suffix)
    }
}

/// Initial state used by both constructions: pheromone split in the ratio
/// of the invariant, branch edges loaded by one application of the rule and
/// interior edges sitting exactly on their flow bounds.
fn proof_state(cx: &Counterexample) -> Result<SystemState> {
    let tp = &cx.two_path;
    let g = tp.graph();
    let (f_s, b_d) = cx.schedule.base();
    let total = cx.delta / (1.0 - cx.delta) * (f_s + b_d);
    let mut st = SystemState::zeros(g);
    for branch in [Branch::Top, Branch::Bottom] {
        let lvl = cx.level(branch);
        let split = if lvl <= 0.5 { cx.rule.eval(lvl) } else { 1.0 - cx.rule.eval(1.0 - lvl) };
        let edges = tp.branch_edges(branch);
        let last = edges.len() - 1;
        for (i, &e) in edges.iter().enumerate() {
            let (fb, bb) = cx.flow_bounds(branch, i, 0);
            st.pheromone[e] = total * lvl;
            st.f_edge[e] = if i == 0 { f_s * split } else { fb };
            st.b_edge[e] = if i == last { b_d * split } else { bb };
        }
        let path = tp.path(branch).vertices();
        for (i, &v) in path.iter().enumerate().skip(1).take(path.len() - 2) {
            st.f_vertex[v] = st.f_edge[edges[i]];
            st.b_vertex[v] = st.b_edge[edges[i - 1]];
        }
    }
    st.f_vertex[g.source()] = f_s;
    st.b_vertex[g.destination()] = b_d;
    Ok(st)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeakageOptions {
    /// Survival factors `(top, bottom)` of the two branches. Chosen
    /// automatically when absent.
    pub survival: Option<(f64, f64)>,
    pub r: Option<f64>,
    pub eps: Option<f64>,
    pub grid: usize,
    pub delta: f64,
}

impl Default for LeakageOptions {
    fn default() -> Self {
        Self { survival: None, r: None, eps: None, grid: crate::rules::DEFAULT_GRID, delta: 0.5 }
    }
}

/// Leakage spread over a branch: the whole loss sits on the first interior
/// vertex.
fn leak_profile(interior: usize, survival: f64) -> Vec<f64> {
    let mut v = vec![0.0; interior];
    if let Some(first) = v.first_mut() {
        *first = 1.0 - survival;
    }
    v
}

/// Builds the leakage counterexample on `two_path` (whose own leakage is
/// replaced). The top branch is always the minimum-leakage one.
pub fn leakage_counterexample(
    rule: &RuleFunction,
    two_path: &TwoPathGraph,
    f_s: f64,
    b_d: f64,
    opts: LeakageOptions,
) -> Result<Counterexample> {
    if !(f_s > 0.0 && b_d > 0.0) {
        return Err(AdversarialError::Precondition("flows must be positive".into()));
    }
    let nl = find_nonlinearity(rule, opts.grid, opts.r, opts.eps)?;
    let ratio_limit = nl.c_g * f_s / b_d;
    let top_len = two_path.top().interior().len();
    let bottom_len = two_path.bottom().interior().len();
    if top_len == 0 || bottom_len == 0 {
        return Err(AdversarialError::Precondition("both branches need an interior vertex to leak".into()));
    }
    let (alpha, beta) = match opts.survival {
        Some(s) => s,
        None => {
            let beta = 0.95;
            let alpha = match nl.case {
                Case::BelowDiagonal => beta * (1.0 + MARGIN * ratio_limit),
                Case::AboveDiagonal => beta / (1.0 - MARGIN * ratio_limit).max(f64::MIN_POSITIVE),
            };
            (alpha.min(1.0), beta)
        }
    };
    let constraint = match nl.case {
        Case::BelowDiagonal => Constraint {
            description: "alpha / beta <= 1 + c_g * f_s / b_d".into(),
            lhs: alpha / beta,
            rhs: 1.0 + ratio_limit,
            holds: alpha / beta <= 1.0 + ratio_limit,
        },
        Case::AboveDiagonal => Constraint {
            description: "beta / alpha >= 1 - c_g * f_s / b_d".into(),
            lhs: beta / alpha,
            rhs: 1.0 - ratio_limit,
            holds: beta / alpha >= 1.0 - ratio_limit,
        },
    };
    if !(alpha <= 1.0 && beta > 0.0 && alpha >= beta) {
        return Err(AdversarialError::Precondition(format!(
            "survival factors ({alpha}, {beta}) must satisfy 1 >= top >= bottom > 0"
        )));
    }
    if !constraint.holds {
        return Err(AdversarialError::Precondition(format!(
            "survival factors violate {}: {} vs {}",
            constraint.description, constraint.lhs, constraint.rhs
        )));
    }
    let tp = two_path.with_leakage(&leak_profile(top_len, alpha), &leak_profile(bottom_len, beta))?;
    let (target, direction) = match nl.case {
        Case::BelowDiagonal => (Branch::Top, Direction::AtMost),
        Case::AboveDiagonal => (Branch::Bottom, Direction::AtLeast),
    };
    let mut cx = Counterexample {
        kind: CounterexampleKind::Leakage,
        rule: rule.clone(),
        nonlinearity: nl,
        two_path: tp,
        schedule: FlowSchedule::constant(f_s, b_d),
        delta: opts.delta,
        initial_state: SystemState::zeros(two_path.graph()),
        target,
        direction,
        bound: nl.r + nl.eps,
        constraint,
    };
    cx.initial_state = proof_state(&cx)?;
    Ok(cx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowOptions {
    /// Per-step growth factor. Chosen automatically when absent.
    pub mu: Option<f64>,
    pub r: Option<f64>,
    pub eps: Option<f64>,
    pub grid: usize,
    pub delta: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { mu: None, r: None, eps: None, grid: crate::rules::DEFAULT_GRID, delta: 0.5 }
    }
}

/// Builds the growing-flow counterexample on a leak-free two-path graph whose
/// top branch is strictly shorter. Injections at both terminals follow
/// `f0 * mu^t`.
///
/// The sufficient condition bounds the growth over the length difference
/// `k` from above: `mu^k <= 1 + c_g` below the diagonal and
/// `mu^k <= 1 / (1 - c_g)` above it.
pub fn flow_counterexample(
    rule: &RuleFunction,
    two_path: &TwoPathGraph,
    f0: f64,
    opts: FlowOptions,
) -> Result<Counterexample> {
    let m = two_path.top().len();
    let n = two_path.bottom().len();
    if m >= n {
        return Err(AdversarialError::Precondition(format!(
            "top branch ({m} edges) must be shorter than bottom ({n})"
        )));
    }
    let g = two_path.graph();
    if (0..g.num_vertices()).any(|v| g.leakage(v) != 0.0) {
        return Err(AdversarialError::Precondition("growing-flow construction needs zero leakage".into()));
    }
    if !(f0 > 0.0) {
        return Err(AdversarialError::Precondition("f0 must be positive".into()));
    }
    let nl = find_nonlinearity(rule, opts.grid, opts.r, opts.eps)?;
    let k = (n - m) as f64;
    let limit = match nl.case {
        Case::BelowDiagonal => 1.0 + nl.c_g,
        Case::AboveDiagonal => 1.0 / (1.0 - nl.c_g),
    };
    let mu = match opts.mu {
        Some(mu) => mu,
        None => (1.0 + MARGIN * (limit - 1.0)).powf(1.0 / k),
    };
    if !(mu > 1.0 && mu.is_finite()) {
        return Err(AdversarialError::Precondition(format!("growth factor {mu} must exceed 1")));
    }
    let growth = mu.powf(k);
    let constraint = Constraint {
        description: format!(
            "mu^{} <= {}",
            n - m,
            if nl.case == Case::BelowDiagonal { "1 + c_g" } else { "1 / (1 - c_g)" }
        ),
        lhs: growth,
        rhs: limit,
        holds: growth <= limit,
    };
    let (target, direction) = match nl.case {
        Case::BelowDiagonal => (Branch::Top, Direction::AtMost),
        Case::AboveDiagonal => (Branch::Bottom, Direction::AtLeast),
    };
    let mut cx = Counterexample {
        kind: CounterexampleKind::GrowingFlow,
        rule: rule.clone(),
        nonlinearity: nl,
        two_path: two_path.clone(),
        schedule: FlowSchedule::Exponential { f0, b0: f0, alpha: mu },
        delta: opts.delta,
        initial_state: SystemState::zeros(two_path.graph()),
        target,
        direction,
        bound: nl.r + nl.eps,
        constraint,
    };
    cx.initial_state = proof_state(&cx)?;
    Ok(cx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundViolation {
    pub t: u64,
    pub what: String,
    pub value: f64,
    pub bound: f64,
}

/// Checks that `levels`, a series of `(t, s-side level, d-side level)` of
/// one branch, stays on the right side of `bound`. Returns the first offence.
pub fn verify_nonconvergence(
    levels: &[(u64, f64, f64)],
    bound: f64,
    direction: Direction,
) -> std::result::Result<(), BoundViolation> {
    for &(t, s_side, d_side) in levels {
        for (what, value) in [("s-side level", s_side), ("d-side level", d_side)] {
            if !direction.holds(value, bound) {
                return Err(BoundViolation { t, what: what.into(), value, bound });
            }
        }
    }
    Ok(())
}

/// Observer enforcing the induction invariant of a counterexample: the
/// branch levels and every per-edge flow bound.
pub struct InductionMonitor<'c> {
    cx: &'c Counterexample,
    pub levels: Vec<(u64, f64, f64)>,
    pub first_violation: Option<BoundViolation>,
    /// Whether the detector ever reported convergence to the target path.
    pub reached_target: bool,
    pub check_flows: bool,
}

impl<'c> InductionMonitor<'c> {
    pub fn new(cx: &'c Counterexample) -> Self {
        Self { cx, levels: Vec::new(), first_violation: None, reached_target: false, check_flows: true }
    }

    fn record(&mut self, state: &SystemState) {
        let cx = self.cx;
        let tp = &cx.two_path;
        let g = tp.graph();
        let s_side = forward_level(state, g, tp.source_edge(cx.target)).unwrap_or(0.5);
        let d_side = backward_level(state, g, tp.destination_edge(cx.target)).unwrap_or(0.5);
        self.levels.push((state.t, s_side, d_side));
        if self.first_violation.is_none() {
            if let Err(v) = verify_nonconvergence(&[(state.t, s_side, d_side)], cx.bound, cx.direction) {
                self.first_violation = Some(v);
            }
        }
        if self.first_violation.is_none() && self.check_flows {
            self.first_violation = self.flow_violation(state);
        }
        if let Some(p) = detect_convergence(state, g, 0.01) {
            let target_path = tp.path(Branch::Top);
            if &p == target_path {
                self.reached_target = true;
            }
        }
    }

    fn flow_violation(&self, state: &SystemState) -> Option<BoundViolation> {
        let cx = self.cx;
        let tp = &cx.two_path;
        let t = state.t;
        for branch in [Branch::Top, Branch::Bottom] {
            let dir = match branch {
                Branch::Top => Direction::AtMost,
                Branch::Bottom => Direction::AtLeast,
            };
            for (i, e) in tp.branch_edges(branch).into_iter().enumerate() {
                let (fb, bb) = cx.flow_bounds(branch, i, t);
                for (what, value, bound) in [("forward", state.f_edge[e], fb), ("backward", state.b_edge[e], bb)] {
                    let scaled_slack = BOUND_SLACK * bound.abs().max(1.0);
                    let ok = match dir {
                        Direction::AtMost => value <= bound + scaled_slack,
                        Direction::AtLeast => value >= bound - scaled_slack,
                    };
                    if !ok {
                        return Some(BoundViolation { t, what: format!("{what} flow on edge {e}"), value, bound });
                    }
                }
            }
        }
        None
    }
}

impl Observer for InductionMonitor<'_> {
    fn start(&mut self, state: &SystemState, _engine: &Engine<'_>) {
        self.record(state);
    }

    fn observe(&mut self, view: &StepView<'_>) -> Control {
        self.record(view.current);
        Control::Continue
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleOutcome {
    pub horizon: u64,
    pub steps_run: u64,
    pub invariant_held: bool,
    pub first_violation: Option<BoundViolation>,
    /// Whether the detector ever reported convergence to the target path.
    pub converged_to_target: bool,
    /// Extreme target level seen: the maximum for an upper bound, the
    /// minimum for a lower one.
    pub extreme_level: f64,
    pub positive_control_converged: bool,
    pub positive_control_time: Option<u64>,
    pub positive_control_path: Option<Path>,
}

/// Runs `cx` under its own rule for `horizon` steps, then reruns the same
/// initial state under the proportional rule as a positive control.
pub fn run_counterexample(cx: &Counterexample, horizon: u64) -> Result<CounterexampleOutcome> {
    let g = cx.two_path.graph();
    let cfg = EngineConfig { delta: cx.delta, epsilon_convergence: None, ..EngineConfig::default() };
    let engine = Engine::new(g, DecisionRule::from(cx.rule.clone()), cx.schedule.clone(), cfg.clone())?;
    let mut monitor = InductionMonitor::new(cx);
    let trace = engine.run(cx.initial_state.clone(), horizon, &mut [&mut monitor])?;
    let mut first_violation = monitor.first_violation.clone();
    if let StopReason::Aborted { t, message } = &trace.stop_reason {
        first_violation.get_or_insert(BoundViolation {
            t: *t,
            what: message.clone(),
            value: f64::NAN,
            bound: cx.bound,
        });
    }
    let extreme_level = monitor.levels.iter().flat_map(|&(_, a, b)| [a, b]).fold(
        match cx.direction {
            Direction::AtMost => f64::NEG_INFINITY,
            Direction::AtLeast => f64::INFINITY,
        },
        |acc, x| match cx.direction {
            Direction::AtMost => acc.max(x),
            Direction::AtLeast => acc.min(x),
        },
    );
    let control = positive_control(cx, horizon)?;
    let target_path = cx.two_path.path(Branch::Top);
    let control_ok = control.converged_path.as_ref() == Some(target_path);
    Ok(CounterexampleOutcome {
        horizon,
        steps_run: trace.steps_run,
        invariant_held: first_violation.is_none() && !monitor.reached_target,
        first_violation,
        converged_to_target: monitor.reached_target,
        extreme_level,
        positive_control_converged: control_ok,
        positive_control_time: control.convergence_time,
        positive_control_path: control.converged_path,
    })
}

/// Same graph, schedule and initial state under the proportional rule.
/// Growing injections are rescaled, which the proportional rule permits.
pub fn positive_control(cx: &Counterexample, horizon: u64) -> Result<crate::dynamics::RunTrace> {
    let g = cx.two_path.graph();
    let rescale = match cx.schedule {
        FlowSchedule::Exponential { .. } => crate::dynamics::RescaleMode::NormalizeBySource,
        _ => crate::dynamics::RescaleMode::Off,
    };
    let cfg = EngineConfig {
        delta: cx.delta,
        rescale,
        epsilon_convergence: Some(0.01),
        stop_on_convergence: true,
        ..EngineConfig::default()
    };
    let engine = Engine::new(g, DecisionRule::Linear, cx.schedule.clone(), cfg)?;
    Ok(engine.run(cx.initial_state.clone(), horizon, &mut [])?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub kind: CounterexampleKind,
    pub rule: String,
    pub r: f64,
    pub eps: f64,
    pub c_eps: f64,
    pub c_g: f64,
    pub case: Case,
    pub constraint: Constraint,
    pub horizon: u64,
    pub invariant_held: bool,
    pub positive_control_converged: bool,
    pub survival: Option<(f64, f64)>,
    pub mu: Option<f64>,
    pub outcome: CounterexampleOutcome,
}

impl CounterexampleReport {
    pub fn new(cx: &Counterexample, outcome: CounterexampleOutcome) -> Self {
        let nl = cx.nonlinearity;
        let survival = (cx.kind == CounterexampleKind::Leakage)
            .then(|| (cx.two_path.survival(Branch::Top), cx.two_path.survival(Branch::Bottom)));
        let mu = match cx.schedule {
            FlowSchedule::Exponential { alpha, .. } => Some(alpha),
            _ => None,
        };
        Self {
            kind: cx.kind,
            rule: cx.rule.label(),
            r: nl.r,
            eps: nl.eps,
            c_eps: nl.c_eps,
            c_g: nl.c_g,
            case: nl.case,
            constraint: cx.constraint.clone(),
            horizon: outcome.horizon,
            invariant_held: outcome.invariant_held,
            positive_control_converged: outcome.positive_control_converged,
            survival,
            mu,
            outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwapRun {
    pub p_top: f64,
    pub p_bottom: f64,
    pub converged: Option<Branch>,
    pub convergence_time: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwapReport {
    pub rule: String,
    pub base: SwapRun,
    pub swapped: SwapRun,
    pub degenerate: bool,
    pub flipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwapOptions {
    /// Initial pheromone of every edge not leaving `s`.
    pub other_pheromone: f64,
    pub f0: f64,
    pub delta: f64,
    pub horizon: u64,
    pub epsilon: f64,
}

impl Default for SwapOptions {
    fn default() -> Self {
        Self { other_pheromone: 1.0, f0: 1.0, delta: 0.5, horizon: 10_000, epsilon: 0.01 }
    }
}

fn swap_run(tp: &TwoPathGraph, rule: &DecisionRule, p_top: f64, p_bottom: f64, opts: SwapOptions) -> Result<SwapRun> {
    let g = tp.graph();
    let cfg = EngineConfig {
        delta: opts.delta,
        epsilon_convergence: Some(opts.epsilon),
        stop_on_convergence: true,
        ..EngineConfig::default()
    };
    let engine = Engine::new(g, rule.clone(), FlowSchedule::constant(opts.f0, 0.0), cfg)?;
    let mut st = SystemState::zeros(g);
    st.pheromone.fill(opts.other_pheromone);
    st.pheromone[tp.source_edge(Branch::Top)] = p_top;
    st.pheromone[tp.source_edge(Branch::Bottom)] = p_bottom;
    st.f_vertex[g.source()] = opts.f0;
    let trace = engine.run(st, opts.horizon, &mut [])?;
    let converged = trace.converged_path.as_ref().map(|p| if p == tp.top() { Branch::Top } else { Branch::Bottom });
    Ok(SwapRun { p_top, p_bottom, converged, convergence_time: trace.convergence_time })
}

/// Runs the one-way scenario from `(p_top, p_bottom)` on the two edges
/// leaving `s`, then again with the two values exchanged.
pub fn unidirectional_swap_demo(
    two_path: &TwoPathGraph,
    rule: &DecisionRule,
    p_top: f64,
    p_bottom: f64,
    opts: SwapOptions,
) -> Result<SwapReport> {
    if !(p_top > 0.0 && p_bottom > 0.0) {
        return Err(AdversarialError::Precondition("initial pheromones on s's edges must be positive".into()));
    }
    let base = swap_run(two_path, rule, p_top, p_bottom, opts)?;
    let swapped = swap_run(two_path, rule, p_bottom, p_top, opts)?;
    let degenerate = p_top == p_bottom;
    let flipped = matches!((base.converged, swapped.converged), (Some(a), Some(b)) if a != b);
    Ok(SwapReport { rule: rule.label(), base, swapped, degenerate, flipped })
}

/// Draws `count` seeded initial pairs in `(0, 1)` that differ by at least 5%
/// and runs the swap demo on each.
pub fn swap_batch(
    two_path: &TwoPathGraph,
    rule: &DecisionRule,
    count: usize,
    seed: u64,
    opts: SwapOptions,
) -> Result<Vec<SwapReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a: f64 = rng.gen_range(0.0..1.0);
        let b: f64 = rng.gen_range(0.0..1.0);
        if a <= 0.0 || b <= 0.0 || (a - b).abs() < 0.05 * a.max(b) {
            continue;
        }
        out.push(unidirectional_swap_demo(two_path, rule, a, b, opts)?);
    }
    Ok(out)
}
