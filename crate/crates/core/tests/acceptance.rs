//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use antflow::adversarial::{
    flow_counterexample, leakage_counterexample, run_counterexample, swap_batch, Counterexample, FlowOptions,
    LeakageOptions, SwapOptions,
};
use antflow::analysis::{
    check_potential_growth, normalized_levels, theorem_constants, InvariantMonitor, PheromoneBoundMonitor,
    PotentialMonitor,
};
use antflow::dynamics::{
    Control, Engine, EngineConfig, FlowSchedule, Observer, PheromoneInit, RescaleMode, StepView, SystemState,
};
use antflow::equilibria::{equilibrium_drift, stability_experiment, EquilibriumSpec, StabilityParams};
use antflow::experiments::batch::{run_preset, BatchOptions, BatchResult, Preset};
use antflow::experiments::run_scenario;
use antflow::experiments::scenario::{parse_scenario, MonitorKind};
use antflow::graph::{build_two_path, gen_gnp, min_leakage_path, path_leakage, Branch, DirectedGraph, TwoPathGraph};
use antflow::rules::{fixed_points, stable_fixed_points, DecisionRule, RuleFunction, DEFAULT_GRID, DEFAULT_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Invariant checks gathered from every run of the suite.
#[derive(Default)]
struct InvariantTally {
    runs: usize,
    steps: u64,
    violations: u64,
    worst_rel: f64,
    first: Option<String>,
}

impl InvariantTally {
    fn absorb(&mut self, label: &str, m: &InvariantMonitor) {
        self.runs += 1;
        self.steps += m.steps_checked;
        self.violations += m.violation_count;
        self.worst_rel = m.max_rel_error.iter().copied().fold(self.worst_rel, f64::max);
        if self.first.is_none() {
            if let Some(v) = m.violations.first() {
                self.first = Some(format!("{label}: {v:?}"));
            }
        }
    }
}

struct Checked(InvariantMonitor);

impl Observer for Checked {
    fn observe(&mut self, view: &StepView<'_>) -> Control {
        self.0.check(view);
        Control::Continue
    }
}

fn two_path(top: &[f64], bottom: &[f64]) -> TwoPathGraph {
    build_two_path(2, 3, top, bottom).unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("runtime {:.2}s over the {limit_s}s budget", elapsed.as_secs_f64())
    })
}

fn a1(tally: &mut InvariantTally) -> Outcome {
    let started = Instant::now();
    // all loss on the first interior vertex of each branch
    let tp = two_path(&[0.03], &[0.05, 0.0]);
    let g = tp.graph();
    let consts = theorem_constants(1.0, 1.0, 0.5, tp.survival(Branch::Top), tp.survival(Branch::Bottom), 1.0)
        .map_err(|e| e.to_string())?;
    let cfg =
        EngineConfig { delta: 0.5, epsilon_convergence: Some(0.01), stop_on_convergence: false, ..Default::default() };
    let eng = Engine::new(g, DecisionRule::Linear, FlowSchedule::constant(1.0, 1.0), cfg).map_err(|e| e.to_string())?;
    let st = eng.init_state(&PheromoneInit::Constant(1.0)).map_err(|e| e.to_string())?;
    let mut potential = PotentialMonitor::new(&tp);
    let mut bound = PheromoneBoundMonitor::new(consts.t1);
    let mut inv = Checked(InvariantMonitor::default());
    let trace = eng.run(st, 2000, &mut [&mut potential, &mut bound, &mut inv]).map_err(|e| e.to_string())?;
    tally.absorb("A1", &inv.0);
    let elapsed = started.elapsed();

    ensure(trace.converged_path.as_ref() == Some(tp.top()), || format!("converged to {:?}", trace.converged_path))?;
    ensure(trace.final_path.as_ref() == Some(tp.top()), || "top path not held at the horizon".into())?;
    check_potential_growth(&potential.trace, 1.0, 0.0).map_err(|v| format!("r_min decreased: {v:?}"))?;
    check_potential_growth(&potential.trace, consts.gamma_l, consts.t1).map_err(|v| format!("growth: {v:?}"))?;
    ensure(bound.first_violation.is_none(), || format!("pheromone bound: {:?}", bound.first_violation))?;
    ensure(bound.checked > 0, || "bound never checked".into())?;
    within(elapsed, 1.0)?;
    Ok(format!(
        "converged at t={} gamma_l={:.6} T1={} bound checked on {} steps, {:.0} ms",
        trace.convergence_time.unwrap_or(0),
        consts.gamma_l,
        consts.t1,
        bound.checked,
        elapsed.as_secs_f64() * 1e3
    ))
}

fn growing_run(
    tally: &mut InvariantTally,
    label: &str,
    schedule: FlowSchedule,
    rescale: RescaleMode,
    horizon: u64,
) -> Outcome {
    let started = Instant::now();
    let tp = two_path(&[0.0], &[0.0, 0.0]);
    let g = tp.graph();
    let cfg = EngineConfig {
        delta: 0.5,
        rescale,
        epsilon_convergence: Some(0.01),
        stop_on_convergence: true,
        ..Default::default()
    };
    let eng = Engine::new(g, DecisionRule::Linear, schedule, cfg).map_err(|e| e.to_string())?;
    let st = eng.init_state(&PheromoneInit::Constant(1.0)).map_err(|e| e.to_string())?;
    let mut potential = PotentialMonitor::new(&tp);
    let mut inv = Checked(InvariantMonitor::default());
    let trace = eng.run(st, horizon, &mut [&mut potential, &mut inv]).map_err(|e| e.to_string())?;
    tally.absorb(label, &inv.0);
    let elapsed = started.elapsed();
    ensure(trace.converged_path.as_ref() == Some(tp.top()), || {
        format!("no convergence to the short path within {horizon} steps: {:?}", trace.converged_path)
    })?;
    check_potential_growth(&potential.trace, 1.0, 0.0).map_err(|v| format!("r_min decreased: {v:?}"))?;
    Ok(format!("converged at t={}, {:.0} ms", trace.convergence_time.unwrap_or(0), elapsed.as_secs_f64() * 1e3))
        .and_then(|s| within(elapsed, if label == "A2" { 1.0 } else { 5.0 }).map(|_| s))
}

fn a2(tally: &mut InvariantTally) -> Outcome {
    growing_run(
        tally,
        "A2",
        FlowSchedule::Exponential { f0: 1.0, b0: 1.0, alpha: 1.1 },
        RescaleMode::NormalizeBySource,
        10_000,
    )
}

fn a3(tally: &mut InvariantTally) -> Outcome {
    growing_run(tally, "A3", FlowSchedule::Linear { f0: 1.0, b0: 1.0, alpha: 0.1 }, RescaleMode::Off, 100_000)
}

fn a4() -> Outcome {
    let tp = two_path(&[0.0], &[0.0, 0.0]);
    let rules =
        [RuleFunction::power(2.0).unwrap(), RuleFunction::power(0.5).unwrap(), RuleFunction::sine(0.05).unwrap()];
    let mut fixed = 0;
    let mut stable = 0;
    let mut worst_drift: f64 = 0.0;
    for rule in &rules {
        let fp = fixed_points(rule, DEFAULT_GRID, DEFAULT_TOL);
        for &r in &fp.points {
            let spec = EquilibriumSpec { r, f_s: 1.0, b_d: 1.0, delta: 0.5 };
            let drift = equilibrium_drift(&tp, rule, spec, 100).map_err(|e| format!("{} r={r}: {e}", rule.label()))?;
            ensure(drift <= 1e-12, || format!("{} r={r}: drift {drift:e}", rule.label()))?;
            worst_drift = worst_drift.max(drift);
            fixed += 1;
        }
        for sp in stable_fixed_points(rule, DEFAULT_GRID, DEFAULT_TOL).stable {
            for seed in 0..20 {
                let params = StabilityParams { seed, ..Default::default() };
                let rep = stability_experiment(rule, sp.r, sp.r_eps / 4.0, 1e-3, 10_000, params)
                    .map_err(|e| format!("{} r={}: {e}", rule.label(), sp.r))?;
                ensure(rep.held_until_tmax, || {
                    format!(
                        "{} r={} seed {seed}: t_converged={:?} held={}",
                        rule.label(),
                        sp.r,
                        rep.t_converged,
                        rep.held_until_tmax
                    )
                })?;
            }
            stable += 1;
        }
    }
    ensure(stable > 0, || "no stable fixed point found".into())?;
    Ok(format!(
        "{fixed} fixed points (max drift {worst_drift:.1e}), {stable} stable points x 20 seeds returned and held"
    ))
}

fn counterexample_invariants(
    tally: &mut InvariantTally,
    label: &str,
    cx: &Counterexample,
    steps: u64,
) -> Result<(), String> {
    let g = cx.two_path.graph();
    let cfg = EngineConfig { delta: cx.delta, epsilon_convergence: None, ..Default::default() };
    let eng = Engine::new(g, DecisionRule::from(cx.rule.clone()), cx.schedule, cfg).map_err(|e| e.to_string())?;
    let mut inv = Checked(InvariantMonitor::default());
    eng.run(cx.initial_state.clone(), steps, &mut [&mut inv]).map_err(|e| e.to_string())?;
    tally.absorb(label, &inv.0);
    Ok(())
}

fn a5(tally: &mut InvariantTally) -> Outcome {
    let tp = two_path(&[0.0], &[0.0, 0.0]);
    let rule = RuleFunction::power(2.0).unwrap();
    let opts = LeakageOptions { survival: Some((0.97, 0.95)), r: Some(0.25), eps: Some(0.1), ..Default::default() };
    let cx = leakage_counterexample(&rule, &tp, 1.0, 1.0, opts).map_err(|e| e.to_string())?;
    let nl = cx.nonlinearity;
    ensure((nl.c_g - 0.02625).abs() < 1e-12, || format!("c_g = {}", nl.c_g))?;
    let out = run_counterexample(&cx, 100_000).map_err(|e| e.to_string())?;
    counterexample_invariants(tally, "A5", &cx, 10_000)?;
    ensure(out.steps_run == 100_000, || format!("stopped after {} steps", out.steps_run))?;
    ensure(out.invariant_held, || format!("invariant broken: {:?}", out.first_violation))?;
    ensure(out.extreme_level <= 0.35 + 1e-9, || format!("level reached {}", out.extreme_level))?;
    ensure(!out.converged_to_target, || "converged to the min-leakage path".into())?;
    ensure(out.positive_control_converged, || format!("linear control: {:?}", out.positive_control_path))?;
    Ok(format!(
        "max level {:.6} over 1e5 steps, linear control converged at t={}",
        out.extreme_level,
        out.positive_control_time.unwrap_or(0)
    ))
}

fn a6(tally: &mut InvariantTally) -> Outcome {
    let tp = two_path(&[0.0], &[0.0, 0.0]);
    let rule = RuleFunction::power(2.0).unwrap();
    let reports =
        swap_batch(&tp, &DecisionRule::from(rule.clone()), 20, 0, SwapOptions::default()).map_err(|e| e.to_string())?;
    let flipped = reports.iter().filter(|r| !r.degenerate && r.flipped).count();
    ensure(flipped == reports.len(), || {
        let bad = reports.iter().find(|r| r.degenerate || !r.flipped).unwrap();
        format!("{flipped}/{} flipped; first failure {bad:?}", reports.len())
    })?;

    let opts = FlowOptions { mu: Some(1.03), ..Default::default() };
    let cx = flow_counterexample(&rule, &tp, 1.0, opts).map_err(|e| e.to_string())?;
    let out = run_counterexample(&cx, 10_000).map_err(|e| e.to_string())?;
    counterexample_invariants(tally, "A6", &cx, 2_000)?;
    ensure(out.invariant_held, || format!("growth invariant broken: {:?}", out.first_violation))?;
    ensure(out.positive_control_converged, || format!("linear control: {:?}", out.positive_control_path))?;
    Ok(format!(
        "swap flipped {flipped}/20; growth bound held 1e4 steps, control converged at t={}",
        out.positive_control_time.unwrap_or(0)
    ))
}

fn a7(batches: &mut Vec<BatchResult>) -> Outcome {
    let opts = BatchOptions::default();
    let mut parts = Vec::new();
    let mut failure = None;
    for preset in [Preset::AppendixCLeakage, Preset::AppendixCIncreasing] {
        let res = run_preset(preset, &opts);
        parts.push(format!("{} {}/{}", res.label, res.matches, res.instances));
        if res.matches != res.instances || res.errors > 0 {
            let bad: Vec<String> = res.rows.iter().filter(|r| !r.matched).map(|r| format!("seed {}", r.seed)).collect();
            failure
                .get_or_insert(format!("{}: {}/{} matched, mismatches {bad:?}", res.label, res.matches, res.instances));
        }
        batches.push(res);
    }
    match failure {
        Some(f) => Err(f),
        None => Ok(parts.join(", ")),
    }
}

/// Minimum path leakage over every simple s-d path.
fn brute_force_min_leakage(g: &DirectedGraph) -> Option<(f64, usize)> {
    fn walk(g: &DirectedGraph, v: usize, survival: f64, seen: &mut Vec<bool>, best: &mut Vec<f64>) {
        if v == g.destination() {
            best.push(1.0 - survival);
            return;
        }
        for &(_, w) in g.out_edges(v).iter().map(|&e| &g.edges()[e]) {
            if !seen[w] {
                seen[w] = true;
                let keep = if w == g.destination() { 1.0 } else { 1.0 - g.leakage(w) };
                walk(g, w, survival * keep, seen, best);
                seen[w] = false;
            }
        }
    }
    let mut seen = vec![false; g.num_vertices()];
    seen[g.source()] = true;
    let mut all = Vec::new();
    walk(g, g.source(), 1.0, &mut seen, &mut all);
    let min = all.iter().copied().fold(f64::INFINITY, f64::min);
    let ties = all.iter().filter(|&&x| x <= min + 1e-12).count();
    (!all.is_empty()).then_some((min, ties))
}

fn scale_invariance() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let g = gen_gnp(30, 0.15, seed).map_err(|e| e.to_string())?;
        let mut g = g;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.assign_interior_leakage(|_| rng.gen_range(0.0..0.5)).map_err(|e| e.to_string())?;
        let schedule = FlowSchedule::constant(0.8, 0.6);
        let cfg = EngineConfig { delta: 0.4, epsilon_convergence: None, ..Default::default() };
        let init = PheromoneInit::Uniform { low: 0.1, high: 1.0, seed };
        let base_eng = Engine::new(&g, DecisionRule::Linear, schedule, cfg.clone()).map_err(|e| e.to_string())?;
        let a = base_eng.init_state(&init).map_err(|e| e.to_string())?;
        for c in [1e-3, 7.5, 1e4] {
            let eng =
                Engine::new(&g, DecisionRule::Linear, schedule.scaled(c), cfg.clone()).map_err(|e| e.to_string())?;
            let mut b: SystemState = a.clone();
            b.scale_all(c);
            let mut x = a.clone();
            for _ in 0..300 {
                x = base_eng.step(&x).map_err(|e| e.to_string())?;
                b = eng.step(&b).map_err(|e| e.to_string())?;
                let (la, lb) = (normalized_levels(&x, &g), normalized_levels(&b, &g));
                for (p, q) in la.fwd.iter().zip(&lb.fwd).chain(la.bwd.iter().zip(&lb.bwd)) {
                    if let (Some(p), Some(q)) = (p, q) {
                        worst = worst.max((p - q).abs());
                    } else if p.is_some() != q.is_some() {
                        return Err(format!("seed {seed} c={c}: level defined in only one run"));
                    }
                }
            }
        }
    }
    Ok(worst)
}

fn scenario_files(tally: &mut InvariantTally) -> Result<usize, String> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut count = 0;
    let mut entries: Vec<_> = std::fs::read_dir(&dir).map_err(|e| e.to_string())?.flatten().map(|e| e.path()).collect();
    entries.sort();
    for path in entries.into_iter().filter(|p| p.extension().is_some_and(|x| x == "toml")) {
        let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let mut sc = parse_scenario(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if !sc.monitors.contains(&MonitorKind::Invariants) {
            sc.monitors.push(MonitorKind::Invariants);
        }
        let out = run_scenario(&sc, None).map_err(|e| format!("{}: {e}", path.display()))?;
        let inv = out.monitors.invariants.as_ref().ok_or("invariant monitor missing")?;
        tally.runs += 1;
        tally.steps += inv.steps_checked;
        tally.violations += inv.violation_count;
        tally.worst_rel = inv.max_rel_error.iter().copied().fold(tally.worst_rel, f64::max);
        if inv.violation_count > 0 && tally.first.is_none() {
            tally.first = Some(format!("{}: {:?}", path.display(), inv.violations.first()));
        }
        count += 1;
    }
    Ok(count)
}

fn a8(tally: &mut InvariantTally, batches: &[BatchResult]) -> Outcome {
    let scenarios = scenario_files(tally)?;
    for res in batches {
        for row in &res.rows {
            tally.runs += 1;
            tally.violations += row.invariant_violations;
            if row.invariant_violations > 0 && tally.first.is_none() {
                tally.first = Some(format!("{} seed {}: {} violations", res.label, row.seed, row.invariant_violations));
            }
        }
    }
    ensure(tally.violations == 0, || {
        format!("{} invariant violations over {} runs; first {:?}", tally.violations, tally.runs, tally.first)
    })?;

    let worst_scale = scale_invariance()?;
    ensure(worst_scale <= 1e-9, || format!("scale invariance off by {worst_scale:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    let mut attempt = 0u64;
    while checked < 100 {
        attempt += 1;
        let n = rng.gen_range(4..=20);
        let p = (2.5 / n as f64).min(0.6);
        let Ok(mut g) = gen_gnp(n, p, 10_000 + attempt) else {
            continue;
        };
        g.assign_interior_leakage(|_| rng.gen_range(0.0..1.0)).map_err(|e| e.to_string())?;
        let Some((best, _ties)) = brute_force_min_leakage(&g) else {
            continue;
        };
        let found = min_leakage_path(&g).ok_or_else(|| format!("graph {attempt}: no path found"))?;
        let leak = path_leakage(&g, &found).map_err(|e| e.to_string())?;
        ensure((leak - best).abs() <= 1e-12, || format!("graph {attempt}: oracle {leak} vs brute force {best}"))?;
        checked += 1;
    }
    Ok(format!(
        "{} runs / {} checked steps clean (worst rel {:.1e}), {scenarios} scenario files, scale drift {worst_scale:.1e}, 100 brute-force graphs agree",
        tally.runs, tally.steps, tally.worst_rel
    ))
}

fn report(name: &str, result: Outcome, started: Instant) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("{name} PASS ({secs:.2}s) {detail}"),
        Err(why) => println!("{name} FAIL ({secs:.2}s) {why}"),
    }
    result.is_ok()
}

fn main() {
    let mut tally = InvariantTally::default();
    let mut batches = Vec::new();
    let mut results = Vec::new();
    let t = Instant::now();
    results.push(report("A1", a1(&mut tally), t));
    let t = Instant::now();
    results.push(report("A2", a2(&mut tally), t));
    let t = Instant::now();
    results.push(report("A3", a3(&mut tally), t));
    let t = Instant::now();
    results.push(report("A4", a4(), t));
    let t = Instant::now();
    results.push(report("A5", a5(&mut tally), t));
    let t = Instant::now();
    results.push(report("A6", a6(&mut tally), t));
    let t = Instant::now();
    results.push(report("A7", a7(&mut batches), t));
    let t = Instant::now();
    results.push(report("A8", a8(&mut tally, &batches), t));
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
