//! Decision rules and fixed-point analysis of the general rule family.
//!
//! A general rule is a monotone map `g: [0, 1/2] -> [0, 1]` with `g(0) = 0`
//! and `g(1/2) = 1/2`. At a two-way branch the edge with the smaller
//! normalized pheromone level `x` receives the fraction `g(x)` of the flow.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub const DEFAULT_GRID: usize = 4097;
pub const DEFAULT_TOL: f64 = 1e-10;

/// Fraction of grid samples within `tol` of the diagonal above which a rule
/// is reported as identically fixed.
const IDENTITY_SHARE: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("negative pheromone {value} at position {index}")]
    NegativePheromone { index: usize, value: f64 },
    #[error("empty pheromone list")]
    Empty,
    #[error("normalized level {0} outside [0, 1/2]")]
    OutOfDomain(f64),
    #[error("invalid rule table: {0}")]
    BadTable(String),
    #[error("invalid rule parameter: {0}")]
    BadParameter(String),
    #[error("stability window [{eps_inner}, {r_eps}] is empty or non-positive")]
    BadWindow { eps_inner: f64, r_eps: f64 },
}

/// A member of the general rule family, evaluated on `[0, 1/2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleFunction {
    /// `g(x) = x`.
    Linear,
    /// `g(x) = 2^(k-1) x^k`; `k = 2` gives `2x^2`, `k = 1/2` gives `sqrt(x/2)`.
    Power { k: f64 },
    /// `g(x) = x + a sin(4 pi x)`.
    Sine { a: f64 },
    /// Piecewise-linear interpolation through `(xs[i], ys[i])`.
    Table { xs: Vec<f64>, ys: Vec<f64> },
}

impl RuleFunction {
    pub fn power(k: f64) -> Result<Self, RuleError> {
        if !(k.is_finite() && k > 0.0) {
            return Err(RuleError::BadParameter(format!("power exponent {k} must be positive")));
        }
        Ok(RuleFunction::Power { k })
    }

    pub fn sine(a: f64) -> Result<Self, RuleError> {
        if !a.is_finite() {
            return Err(RuleError::BadParameter(format!("sine amplitude {a} is not finite")));
        }
        Ok(RuleFunction::Sine { a })
    }

    pub fn table(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, RuleError> {
        let rule = RuleFunction::Table { xs, ys };
        rule.check_table()?;
        Ok(rule)
    }

    /// Samples `f` on `grid` evenly spaced points of `[0, 1/2]`.
    pub fn tabulate(f: impl Fn(f64) -> f64, grid: usize) -> Result<Self, RuleError> {
        let xs = grid_points(grid);
        let ys = xs.iter().map(|&x| f(x)).collect();
        Self::table(xs, ys)
    }

    fn check_table(&self) -> Result<(), RuleError> {
        let RuleFunction::Table { xs, ys } = self else {
            return Ok(());
        };
        if xs.len() != ys.len() {
            return Err(RuleError::BadTable(format!("{} xs but {} ys", xs.len(), ys.len())));
        }
        if xs.len() < 2 {
            return Err(RuleError::BadTable("need at least two samples".into()));
        }
        if xs[0] != 0.0 || *xs.last().unwrap() != 0.5 {
            return Err(RuleError::BadTable("xs must start at 0 and end at 0.5".into()));
        }
        if xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(RuleError::BadTable("xs must be strictly increasing".into()));
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(RuleError::BadTable("ys must be finite".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, RuleFunction::Linear)
    }

    /// Evaluates `g(x)`. Inputs are clamped to `[0, 1/2]` to absorb rounding
    /// in callers that compute `x` as a ratio.
    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 0.5);
        match self {
            RuleFunction::Linear => x,
            RuleFunction::Power { k } => {
                if x == 0.0 {
                    0.0
                } else {
                    0.5 * (2.0 * x).powf(*k)
                }
            }
            RuleFunction::Sine { a } => x + a * (4.0 * PI * x).sin(),
            RuleFunction::Table { xs, ys } => {
                let i = match xs.binary_search_by(|p| p.total_cmp(&x)) {
                    Ok(i) => return ys[i],
                    Err(i) => i.clamp(1, xs.len() - 1),
                };
                let w = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
                ys[i - 1] + w * (ys[i] - ys[i - 1])
            }
        }
    }

    /// `g(x) - x`.
    pub fn gap(&self, x: f64) -> f64 {
        self.eval(x) - x
    }

    pub fn label(&self) -> String {
        match self {
            RuleFunction::Linear => "linear".into(),
            RuleFunction::Power { k } => format!("power({k})"),
            RuleFunction::Sine { a } => format!("sine({a})"),
            RuleFunction::Table { xs, .. } => format!("table({} points)", xs.len()),
        }
    }
}

/// How flow at a vertex is divided among its edges.
#[derive(Debug, Clone, PartialEq)]
pub enum DecisionRule {
    Linear,
    General(RuleFunction),
}

impl DecisionRule {
    pub fn is_linear(&self) -> bool {
        matches!(self, DecisionRule::Linear)
    }

    pub fn label(&self) -> String {
        match self {
            DecisionRule::Linear => "linear".into(),
            DecisionRule::General(g) => g.label(),
        }
    }
}

impl From<RuleFunction> for DecisionRule {
    /// The identity function maps to the proportional rule, which is also
    /// defined on graphs with branching above two.
    fn from(g: RuleFunction) -> Self {
        if g.is_identity() {
            DecisionRule::Linear
        } else {
            DecisionRule::General(g)
        }
    }
}

/// Proportional split. Returns the fractions and whether the zero-total
/// fallback (uniform split) was taken.
pub fn linear_split(pheromones: &[f64]) -> Result<(Vec<f64>, bool), RuleError> {
    if pheromones.is_empty() {
        return Err(RuleError::Empty);
    }
    if let Some((index, &value)) = pheromones.iter().enumerate().find(|(_, p)| !(**p >= 0.0)) {
        return Err(RuleError::NegativePheromone { index, value });
    }
    let total: f64 = pheromones.iter().sum();
    if total > 0.0 {
        Ok((pheromones.iter().map(|p| p / total).collect(), false))
    } else {
        let k = pheromones.len() as f64;
        Ok((vec![1.0 / k; pheromones.len()], true))
    }
}

/// `(g(x), 1 - g(x))` for the smaller normalized level `x` of a two-way branch.
pub fn general_split(rule: &RuleFunction, norm_min: f64) -> Result<(f64, f64), RuleError> {
    if !(0.0..=0.5).contains(&norm_min) {
        return Err(RuleError::OutOfDomain(norm_min));
    }
    let on_min = rule.eval(norm_min);
    Ok((on_min, 1.0 - on_min))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum RuleViolation {
    StartNotZero { value: f64 },
    MidpointNotHalf { value: f64 },
    NotMonotone { x0: f64, y0: f64, x1: f64, y1: f64 },
    OutOfRange { x: f64, y: f64 },
}

/// Checks the family invariants on `grid` points; reports the endpoint
/// violations, the first decreasing pair and the first out-of-range sample.
pub fn validate_rule(rule: &RuleFunction, grid: usize) -> Vec<RuleViolation> {
    const TOL: f64 = 1e-12;
    let mut out = Vec::new();
    let g0 = rule.eval(0.0);
    if g0.abs() > TOL {
        out.push(RuleViolation::StartNotZero { value: g0 });
    }
    let gh = rule.eval(0.5);
    if (gh - 0.5).abs() > TOL {
        out.push(RuleViolation::MidpointNotHalf { value: gh });
    }
    let xs = grid_points(grid.max(2));
    let ys: Vec<f64> = xs.iter().map(|&x| rule.eval(x)).collect();
    if let Some(i) = (0..xs.len() - 1).find(|&i| ys[i] > ys[i + 1] + TOL) {
        out.push(RuleViolation::NotMonotone { x0: xs[i], y0: ys[i], x1: xs[i + 1], y1: ys[i + 1] });
    }
    if let Some(i) = (0..xs.len()).find(|&i| !(-TOL..=1.0 + TOL).contains(&ys[i])) {
        out.push(RuleViolation::OutOfRange { x: xs[i], y: ys[i] });
    }
    out
}

/// `n` evenly spaced points covering `[0, 1/2]` inclusive.
pub fn grid_points(n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs at least two points");
    let step = 0.5 / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { 0.5 } else { i as f64 * step }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPoints {
    pub points: Vec<f64>,
    /// Set when `|g(x) - x| <= tol` on at least 99% of the grid.
    pub identically_fixed: bool,
}

fn bisect(rule: &RuleFunction, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let mut h_lo = rule.gap(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let h_mid = rule.gap(mid);
        if h_mid.abs() <= 0.5 * tol || hi - lo <= f64::EPSILON * 0.5 {
            return mid;
        }
        if (h_mid > 0.0) == (h_lo > 0.0) {
            lo = mid;
            h_lo = h_mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    [lo, mid, hi].into_iter().min_by(|a, b| rule.gap(*a).abs().total_cmp(&rule.gap(*b).abs())).unwrap()
}

/// Fixed points of `g` in `[0, 1/2]` by grid sign scan and bisection.
pub fn fixed_points(rule: &RuleFunction, grid: usize, tol: f64) -> FixedPoints {
    let xs = grid_points(grid.max(64));
    let hs: Vec<f64> = xs.iter().map(|&x| rule.gap(x)).collect();
    let near = hs.iter().filter(|h| h.abs() <= tol).count();
    let identically_fixed = near as f64 >= IDENTITY_SHARE * xs.len() as f64;

    let mut points = vec![0.0, 0.5];
    for (i, (&x, &h)) in xs.iter().zip(&hs).enumerate() {
        if h.abs() <= tol {
            points.push(x);
        } else if let Some(&h_next) = hs.get(i + 1) {
            if h_next.abs() > tol && (h > 0.0) != (h_next > 0.0) {
                points.push(bisect(rule, x, xs[i + 1], tol));
            }
        }
    }
    points.sort_by(f64::total_cmp);
    points.dedup_by(|a, b| (*a - *b).abs() <= tol);
    FixedPoints { points, identically_fixed }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StablePoint {
    pub r: f64,
    /// Largest radius, resolved on the grid, on which `g - id` has the
    /// stabilizing sign pattern around `r`.
    pub r_eps: f64,
    /// Smallest `|g(x) - x|` over grid samples in the punctured neighborhood.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub fixed_points: Vec<f64>,
    pub identically_fixed: bool,
    pub stable: Vec<StablePoint>,
}

impl FixedPointReport {
    pub fn stable_points(&self) -> Vec<f64> {
        self.stable.iter().map(|s| s.r).collect()
    }
}

/// Sign-pattern extent to one side of `r`: walks grid samples outward while
/// `g - id` keeps the required sign. Returns the distance to the last good
/// sample, the smallest gap seen, and whether any sample was inspected.
fn one_sided_extent(rule: &RuleFunction, xs: &[f64], r: f64, tol: f64, left: bool) -> (f64, f64, bool) {
    let mut extent = 0.0;
    let mut min_gap = f64::INFINITY;
    let mut seen = false;
    let candidates: Box<dyn Iterator<Item = &f64>> = if left {
        Box::new(xs.iter().rev().filter(move |&&x| x < r - tol))
    } else {
        Box::new(xs.iter().filter(move |&&x| x > r + tol))
    };
    for &x in candidates {
        let h = rule.gap(x);
        let good = if left { h > tol } else { h < -tol };
        if !good {
            break;
        }
        seen = true;
        extent = (x - r).abs();
        min_gap = min_gap.min(h.abs());
    }
    (extent, min_gap, seen)
}

/// Classifies the fixed points: `r` is stable when `g > id` just left of `r`
/// and `g < id` just right of it. At `0` and `1/2` only the interior side is
/// examined.
pub fn stable_fixed_points(rule: &RuleFunction, grid: usize, tol: f64) -> FixedPointReport {
    let fp = fixed_points(rule, grid, tol);
    let mut stable = Vec::new();
    if !fp.identically_fixed {
        let xs = grid_points(grid.max(64));
        for &r in &fp.points {
            let at_start = r <= tol;
            let at_end = r >= 0.5 - tol;
            let left = (!at_start).then(|| one_sided_extent(rule, &xs, r, tol, true));
            let right = (!at_end).then(|| one_sided_extent(rule, &xs, r, tol, false));
            let sides: Vec<_> = [left, right].into_iter().flatten().collect();
            if sides.iter().all(|&(extent, _, seen)| seen && extent > 0.0) {
                let r_eps = sides.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
                let gap = sides.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
                stable.push(StablePoint { r, r_eps, gap });
            }
        }
    }
    FixedPointReport { fixed_points: fp.points, identically_fixed: fp.identically_fixed, stable }
}

/// `min over x in [eps_inner, r_eps] of min(g(r-x) - (r-x), (r+x) - g(r+x))`,
/// minimized on `grid` points. Terms whose argument leaves `[0, 1/2]` are
/// skipped, which covers the endpoint fixed points.
pub fn stability_margin(
    rule: &RuleFunction,
    r: f64,
    eps_inner: f64,
    r_eps: f64,
    grid: usize,
) -> Result<f64, RuleError> {
    if !(eps_inner > 0.0 && eps_inner <= r_eps) {
        return Err(RuleError::BadWindow { eps_inner, r_eps });
    }
    let n = grid.max(2);
    let mut best = f64::INFINITY;
    for i in 0..n {
        let x = eps_inner + (r_eps - eps_inner) * i as f64 / (n - 1) as f64;
        let lo = r - x;
        let hi = r + x;
        if lo >= 0.0 {
            best = best.min(rule.eval(lo) - lo);
        }
        if hi <= 0.5 {
            best = best.min(hi - rule.eval(hi));
        }
    }
    Ok(best)
}
