//! Scenario documents (TOML) and their materialization into a runnable
//! instance.
//!
//! ```toml
//! name = "two-path"
//! steps = 20000
//! seed = 7
//! delta = 0.5                 # or { uniform = [0.0, 1.0] }
//!
//! [graph]
//! kind = "two_path"
//! m = 2
//! n = 3
//!
//! [leakage]
//! kind = "two_path"
//! top = [0.03]
//! bottom = [0.05, 0.0]
//!
//! [schedule]
//! kind = "constant"
//! f0 = 1.0
//! b0 = 1.0
//! ```

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::dynamics::{EngineConfig, FlowSchedule, PheromoneInit, RescaleMode};
use crate::graph::{
    banded_pattern, build_two_path, count_shortest_paths, gen_banded_gnp, gen_gnp, gen_grid, plant_path,
    plant_vertex_sequence, shortest_path, DirectedGraph, Path, TwoPathGraph,
};
use crate::rules::{DecisionRule, RuleFunction};

/// Cap on generator redraws while looking for an s→d path.
pub const RESAMPLE_CAP: usize = 1000;

/// A number given directly or drawn from an open interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Real {
    Value(f64),
    Uniform { uniform: [f64; 2] },
}

impl Real {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Real::Uniform { uniform: [lo, hi] }
    }

    fn check(&self, key: &str) -> Result<(), ExperimentError> {
        match *self {
            Real::Value(v) if !v.is_finite() => Err(ExperimentError::config(key, format!("{v} is not finite"))),
            Real::Uniform { uniform: [lo, hi] } if !(lo.is_finite() && hi.is_finite() && lo < hi) => {
                Err(ExperimentError::config(key, format!("empty range [{lo}, {hi}]")))
            }
            _ => Ok(()),
        }
    }

    /// Fixed value, or a draw strictly inside the range.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Real::Value(v) => v,
            Real::Uniform { uniform: [lo, hi] } => open_draw(rng, lo, hi),
        }
    }
}

fn open_draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    loop {
        let x = rng.gen_range(lo..hi);
        if x > lo {
            return x;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    #[default]
    None,
    /// A random path of `length` edges that becomes the unique shortest.
    Random { length: usize },
    /// A random path one edge shorter than the current shortest.
    ShorterByOne,
    /// As `shorter_by_one`, but only when the shortest path is not unique.
    IfAmbiguous,
    /// The fixed `1, k+1, 2(k+1), ...` chain of banded graphs, or a random
    /// shorter path when the chain would not be the unique shortest.
    BandedPattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    TwoPath {
        m: usize,
        n: usize,
    },
    Gnp {
        n: usize,
        p: f64,
        #[serde(default)]
        plant: PlantSpec,
    },
    BandedGnp {
        n: usize,
        p: f64,
        k: usize,
        #[serde(default)]
        plant: PlantSpec,
    },
    Grid {
        rows: usize,
        cols: usize,
        #[serde(default)]
        plant: PlantSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LeakageSpec {
    #[default]
    Zero,
    /// Independent draws from the open interval `(low, high)` on every
    /// non-terminal vertex.
    Uniform {
        #[serde(default)]
        low: f64,
        #[serde(default = "one")]
        high: f64,
    },
    /// Interior leakage of the two branches of a two-path graph, in order.
    TwoPath { top: Vec<f64>, bottom: Vec<f64> },
    /// One value per vertex.
    PerVertex { values: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant { f0: Real, b0: Real },
    Exponential { f0: Real, b0: Real, alpha: f64 },
    Linear { f0: Real, b0: Real, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Explicit { values: Vec<f64> },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::Constant { value: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorKind {
    /// Recurrence, conservation, split consistency and non-negativity.
    Invariants,
    PheromoneBound,
    /// Ratio potential on two-path graphs.
    Potential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "yes")]
    pub csv: bool,
    #[serde(default = "yes")]
    pub json: bool,
    #[serde(default = "yes")]
    pub dot: bool,
    /// Every how many steps a time-series row block is written.
    #[serde(default = "one_u64")]
    pub snapshot_interval: u64,
    /// Also write a DOT file every this many steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dot_interval: Option<u64>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { csv: true, json: true, dot: true, snapshot_interval: 1, dot_interval: None }
    }
}

fn yes() -> bool {
    true
}

fn one_u64() -> u64 {
    1
}

fn default_epsilon() -> f64 {
    0.01
}

fn default_delta() -> Real {
    Real::uniform(0.0, 1.0)
}

fn default_underflow() -> f64 {
    1e-300
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: Real,
    #[serde(default = "default_underflow")]
    pub underflow_threshold: f64,
    /// Resolved during parsing: on for exponential schedules with the
    /// proportional rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescale: Option<bool>,
    #[serde(default = "yes")]
    pub stop_on_convergence: bool,
    pub graph: GraphSpec,
    #[serde(default)]
    pub leakage: LeakageSpec,
    #[serde(default = "linear_rule")]
    pub rule: RuleFunction,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub monitors: Vec<MonitorKind>,
    #[serde(default)]
    pub outputs: OutputSpec,
}

fn linear_rule() -> RuleFunction {
    RuleFunction::Linear
}

/// Parses and validates a scenario, filling every default.
pub fn parse_scenario(text: &str) -> Result<Scenario, ExperimentError> {
    let mut sc: Scenario = toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
    sc.resolve()?;
    Ok(sc)
}

/// TOML form of a scenario; parsing it back yields an equal scenario.
pub fn serialize_scenario(sc: &Scenario) -> Result<String, ExperimentError> {
    toml::to_string(sc).map_err(|e| ExperimentError::Parse(e.to_string()))
}

impl Scenario {
    fn is_exponential(&self) -> bool {
        matches!(self.schedule, ScheduleSpec::Exponential { .. })
    }

    /// Fills the derived defaults and checks legality.
    pub fn resolve(&mut self) -> Result<(), ExperimentError> {
        if self.rescale.is_none() {
            self.rescale = Some(self.is_exponential() && self.rule.is_identity());
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg = ExperimentError::config;
        if self.steps == 0 {
            return Err(cfg("steps", "must be at least 1".into()));
        }
        // TOML integers are signed 64-bit
        for (key, v) in [("steps", self.steps), ("seed", self.seed)] {
            if v > i64::MAX as u64 {
                return Err(cfg(key, format!("{v} exceeds {}", i64::MAX)));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(cfg("epsilon", format!("{} must lie in (0, 1/2)", self.epsilon)));
        }
        self.delta.check("delta")?;
        match self.delta {
            Real::Value(d) if !(d > 0.0 && d < 1.0) => return Err(cfg("delta", format!("{d} must lie in (0, 1)"))),
            Real::Uniform { uniform: [lo, hi] } if !(lo >= 0.0 && hi <= 1.0) => {
                return Err(cfg("delta", format!("range [{lo}, {hi}] must lie in [0, 1]")))
            }
            _ => {}
        }
        if !(self.underflow_threshold >= 0.0) {
            return Err(cfg("underflow_threshold", "must be non-negative".into()));
        }
        let two_path = matches!(self.graph, GraphSpec::TwoPath { .. });
        if !self.rule.is_identity() && !two_path {
            return Err(cfg("rule", "general rules need a two_path graph".into()));
        }
        if let Err(e) = crate::rules::validate_rule(&self.rule, 257).first().map_or(Ok(()), |v| Err(v.clone())) {
            return Err(cfg("rule", format!("{e:?}")));
        }
        if self.rescale == Some(true) {
            if !self.rule.is_identity() {
                return Err(cfg("rescale", "rescaling needs the linear rule".into()));
            }
            if !self.is_exponential() {
                return Err(cfg("rescale", "rescaling needs an exponential schedule".into()));
            }
        }
        match &self.schedule {
            ScheduleSpec::Constant { f0, b0 }
            | ScheduleSpec::Exponential { f0, b0, .. }
            | ScheduleSpec::Linear { f0, b0, .. } => {
                f0.check("schedule.f0")?;
                b0.check("schedule.b0")?;
            }
        }
        match &self.leakage {
            LeakageSpec::Uniform { low, high } if !(0.0 <= *low && low < high && *high <= 1.0) => {
                return Err(cfg("leakage", format!("range ({low}, {high}) must lie in [0, 1]")))
            }
            LeakageSpec::TwoPath { .. } if !two_path => {
                return Err(cfg("leakage.kind", "two_path leakage needs a two_path graph".into()))
            }
            _ => {}
        }
        if self.monitors.contains(&MonitorKind::Potential) && !two_path {
            return Err(cfg("monitors", "the potential monitor needs a two_path graph".into()));
        }
        if self.outputs.snapshot_interval == 0 {
            return Err(cfg("outputs.snapshot_interval", "must be at least 1".into()));
        }
        if self.outputs.dot_interval == Some(0) {
            return Err(cfg("outputs.dot_interval", "must be at least 1".into()));
        }
        Ok(())
    }

    /// Draws every random component and builds the graph.
    pub fn instantiate(&self) -> Result<Instance, ExperimentError> {
        self.validate()?;
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(k);
            rng
        };
        let (graph, two_path, planted) = self.build_graph(&mut stream(1))?;
        let graph = self.apply_leakage(graph, two_path.as_ref(), &mut stream(3))?;
        let two_path = match two_path {
            Some(tp) => Some(match &self.leakage {
                LeakageSpec::TwoPath { top, bottom } => tp.with_leakage(top, bottom)?,
                _ => {
                    let top: Vec<f64> = tp.top().interior().iter().map(|&v| graph.leakage(v)).collect();
                    let bottom: Vec<f64> = tp.bottom().interior().iter().map(|&v| graph.leakage(v)).collect();
                    tp.with_leakage(&top, &bottom)?
                }
            }),
            None => None,
        };
        let delta = self.delta.sample(&mut stream(4));
        let mut flows = stream(6);
        let schedule = match &self.schedule {
            ScheduleSpec::Constant { f0, b0 } => {
                FlowSchedule::Constant { f0: f0.sample(&mut flows), b0: b0.sample(&mut flows) }
            }
            ScheduleSpec::Exponential { f0, b0, alpha } => {
                FlowSchedule::Exponential { f0: f0.sample(&mut flows), b0: b0.sample(&mut flows), alpha: *alpha }
            }
            ScheduleSpec::Linear { f0, b0, alpha } => {
                FlowSchedule::Linear { f0: f0.sample(&mut flows), b0: b0.sample(&mut flows), alpha: *alpha }
            }
        };
        schedule.validate()?;
        let init = match &self.init {
            InitSpec::Constant { value } => PheromoneInit::Constant(*value),
            InitSpec::Uniform { low, high } => {
                PheromoneInit::Uniform { low: *low, high: *high, seed: stream(5).next_u64() }
            }
            InitSpec::Explicit { values } => PheromoneInit::Explicit(values.clone()),
        };
        let config = EngineConfig {
            delta,
            underflow_threshold: self.underflow_threshold,
            rescale: if self.rescale == Some(true) { RescaleMode::NormalizeBySource } else { RescaleMode::Off },
            epsilon_convergence: Some(self.epsilon),
            stop_on_convergence: self.stop_on_convergence,
            strict: false,
        };
        Ok(Instance {
            graph: two_path.as_ref().map(|tp| tp.graph().clone()).unwrap_or(graph),
            two_path,
            planted,
            rule: DecisionRule::from(self.rule.clone()),
            schedule,
            init,
            config,
        })
    }

    fn build_graph(
        &self,
        rng: &mut ChaCha8Rng,
    ) -> Result<(DirectedGraph, Option<TwoPathGraph>, Option<Path>), ExperimentError> {
        let (raw, plant, banded) = match &self.graph {
            GraphSpec::TwoPath { m, n } => {
                let tp = build_two_path(*m, *n, &vec![0.0; m.saturating_sub(1)], &vec![0.0; n.saturating_sub(1)])?;
                return Ok((tp.graph().clone(), Some(tp), None));
            }
            GraphSpec::Gnp { n, p, plant } => (connected(|seed| gen_gnp(*n, *p, seed), rng)?, plant, None),
            GraphSpec::BandedGnp { n, p, k, plant } => {
                (connected(|seed| gen_banded_gnp(*n, *p, *k, seed), rng)?, plant, Some((*n, *k)))
            }
            GraphSpec::Grid { rows, cols, plant } => (gen_grid(*rows, *cols)?, plant, None),
        };
        let seed = rng.next_u64();
        let current = shortest_path(&raw).map(|p| p.len()).unwrap_or(0);
        let shorter = |g: &DirectedGraph| {
            if current < 2 {
                return Err(ExperimentError::config("graph.plant", "shortest path is a single edge".into()));
            }
            Ok(plant_path(g, current - 1, seed)?)
        };
        let (g, path) = match plant {
            PlantSpec::None => (raw, None),
            PlantSpec::Random { length } => {
                let (g, p) = plant_path(&raw, *length, seed)?;
                (g, Some(p))
            }
            PlantSpec::ShorterByOne => {
                let (g, p) = shorter(&raw)?;
                (g, Some(p))
            }
            PlantSpec::IfAmbiguous => {
                if count_shortest_paths(&raw) > 1 {
                    let (g, p) = shorter(&raw)?;
                    (g, Some(p))
                } else {
                    let p = shortest_path(&raw);
                    (raw, p)
                }
            }
            PlantSpec::BandedPattern => {
                let (n, k) = banded.ok_or_else(|| {
                    ExperimentError::config("graph.plant", "banded_pattern needs a banded_gnp graph".into())
                })?;
                // The chain can tie with paths already inside the band; fall
                // back to a random strictly shorter path when it does.
                match plant_vertex_sequence(&raw, &banded_pattern(n, k)) {
                    Ok((g, p)) => (g, Some(p)),
                    Err(_) => {
                        let (g, p) = shorter(&raw)?;
                        (g, Some(p))
                    }
                }
            }
        };
        Ok((g, None, path))
    }

    fn apply_leakage(
        &self,
        mut g: DirectedGraph,
        two_path: Option<&TwoPathGraph>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DirectedGraph, ExperimentError> {
        match &self.leakage {
            LeakageSpec::Zero => {}
            LeakageSpec::Uniform { low, high } => g.assign_interior_leakage(|_| open_draw(rng, *low, *high))?,
            LeakageSpec::TwoPath { top, bottom } => {
                let tp = two_path.expect("validated: two_path graph");
                g = tp.with_leakage(top, bottom)?.into_graph();
            }
            LeakageSpec::PerVertex { values } => {
                if values.len() != g.num_vertices() {
                    return Err(ExperimentError::config(
                        "leakage.values",
                        format!("{} values for {} vertices", values.len(), g.num_vertices()),
                    ));
                }
                for (v, &l) in values.iter().enumerate() {
                    g.set_leakage(v, l)?;
                }
            }
        }
        Ok(g)
    }
}

/// Redraws the generator until s reaches d.
fn connected(
    gen: impl Fn(u64) -> Result<DirectedGraph, crate::graph::GraphError>,
    rng: &mut ChaCha8Rng,
) -> Result<DirectedGraph, ExperimentError> {
    for _ in 0..RESAMPLE_CAP {
        let g = gen(rng.next_u64())?;
        if shortest_path(&g).is_some() {
            return Ok(g);
        }
    }
    Err(ExperimentError::config("graph", format!("no s-d path after {RESAMPLE_CAP} draws")))
}

/// Everything needed to build an engine for one scenario.
#[derive(Debug, Clone)]
pub struct Instance {
    pub graph: DirectedGraph,
    pub two_path: Option<TwoPathGraph>,
    pub planted: Option<Path>,
    pub rule: DecisionRule,
    pub schedule: FlowSchedule,
    pub init: PheromoneInit,
    pub config: EngineConfig,
}
