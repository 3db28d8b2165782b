use antflow::analysis::detect_convergence;
use antflow::dynamics::Engine;
use antflow::experiments::batch::{preset_jobs, run_batch, BatchOptions, Preset};
use antflow::experiments::export::{SUMMARY_HEADER, TIMESERIES_HEADER};
use antflow::experiments::run_scenario;
use antflow::experiments::scenario::{
    parse_scenario, serialize_scenario, GraphSpec, InitSpec, LeakageSpec, MonitorKind, OutputSpec, PlantSpec, Real,
    Scenario, ScheduleSpec,
};
use antflow::rules::RuleFunction;
use proptest::prelude::*;

fn real() -> impl Strategy<Value = Real> {
    prop_oneof![
        (0.1f64..5.0).prop_map(Real::Value),
        (0.1f64..1.0, 0.1f64..1.0).prop_map(|(lo, w)| Real::uniform(lo, lo + w)),
    ]
}

fn graph_and_leakage() -> impl Strategy<Value = (GraphSpec, LeakageSpec)> {
    let plant = prop_oneof![
        Just(PlantSpec::None),
        (2usize..6).prop_map(|length| PlantSpec::Random { length }),
        Just(PlantSpec::ShorterByOne),
        Just(PlantSpec::IfAmbiguous),
    ];
    prop_oneof![
        (2usize..5, 2usize..6, prop::collection::vec(0.0f64..1.0, 8)).prop_map(|(m, n, l)| (
            GraphSpec::TwoPath { m, n },
            LeakageSpec::TwoPath { top: l[..m - 1].to_vec(), bottom: l[..n - 1].to_vec() }
        )),
        (10usize..60, 0.05f64..0.3, plant.clone(), 0.0f64..0.5).prop_map(|(n, p, plant, hi)| (
            GraphSpec::Gnp { n, p, plant },
            LeakageSpec::Uniform { low: 0.0, high: hi + 0.1 }
        )),
        (3usize..8, 3usize..8, plant)
            .prop_map(|(rows, cols, plant)| (GraphSpec::Grid { rows, cols, plant }, LeakageSpec::Zero)),
    ]
}

fn scenario() -> impl Strategy<Value = Scenario> {
    let schedule = prop_oneof![
        (real(), real()).prop_map(|(f0, b0)| ScheduleSpec::Constant { f0, b0 }),
        (real(), real(), 1.01f64..1.5).prop_map(|(f0, b0, alpha)| ScheduleSpec::Exponential { f0, b0, alpha }),
        (real(), real(), 0.01f64..1.0).prop_map(|(f0, b0, alpha)| ScheduleSpec::Linear { f0, b0, alpha }),
    ];
    let init = prop_oneof![
        (0.1f64..3.0).prop_map(|value| InitSpec::Constant { value }),
        (0.0f64..1.0, 0.1f64..2.0).prop_map(|(low, w)| InitSpec::Uniform { low, high: low + w }),
    ];
    (
        (
            1u64..100_000,
            0..=i64::MAX as u64,
            0.001f64..0.2,
            prop_oneof![(0.05f64..0.95).prop_map(Real::Value), Just(Real::uniform(0.0, 1.0))],
        ),
        graph_and_leakage(),
        schedule,
        init,
        (any::<bool>(), any::<bool>(), 1u64..50, prop::option::of(1u64..100)),
    )
        .prop_map(
            |((steps, seed, epsilon, delta), (graph, leakage), schedule, init, (csv, stop, interval, dot_interval))| {
                Scenario {
                    name: format!("generated-{seed}"),
                    steps,
                    seed,
                    epsilon,
                    delta,
                    underflow_threshold: 1e-300,
                    rescale: None,
                    stop_on_convergence: stop,
                    graph,
                    leakage,
                    rule: RuleFunction::Linear,
                    schedule,
                    init,
                    monitors: vec![MonitorKind::Invariants],
                    outputs: OutputSpec { csv, json: true, dot: true, snapshot_interval: interval, dot_interval },
                }
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn scenario_round_trip(sc in scenario()) {
        let text = serialize_scenario(&sc).unwrap();
        let parsed = parse_scenario(&text).unwrap();
        let again = parse_scenario(&serialize_scenario(&parsed).unwrap()).unwrap();
        prop_assert_eq!(&again, &parsed);
        let mut resolved = sc.clone();
        resolved.resolve().unwrap();
        prop_assert_eq!(parsed, resolved);
    }
}

#[test]
fn csv_outputs_follow_the_schema() {
    let text = r#"
name = "csv-check"
steps = 57
seed = 4
delta = 0.5
stop_on_convergence = false

[graph]
kind = "gnp"
n = 25
p = 0.2

[leakage]
kind = "uniform"
high = 0.5

[schedule]
kind = "constant"
f0 = 1.0
b0 = 1.0

[outputs]
snapshot_interval = 5
"#;
    let sc = parse_scenario(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_scenario(&sc, Some(dir.path())).unwrap();
    let edges = out.instance.graph.num_edges();

    let mut rdr = csv::Reader::from_path(dir.path().join("timeseries.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), TIMESERIES_HEADER);
    let ts: Vec<u64> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            assert_eq!(r.len(), TIMESERIES_HEADER.len());
            r[0].parse().unwrap()
        })
        .collect();
    let blocks: Vec<u64> = ts
        .chunks(edges)
        .map(|c| {
            assert!(c.iter().all(|&t| t == c[0]));
            c[0]
        })
        .collect();
    assert_eq!(blocks, vec![5, 10, 15, 20, 25, 30, 35, 40, 45, 50, 55, 57]);

    let mut rdr = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), SUMMARY_HEADER);
    let ts: Vec<u64> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            assert_eq!(r.len(), SUMMARY_HEADER.len());
            r[0].parse().unwrap()
        })
        .collect();
    assert!(ts.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(ts, blocks);
}

#[test]
fn batch_rows_pass_the_detector_on_their_final_state() {
    let opts = BatchOptions { instances: Some(4), ..BatchOptions::default() };
    let jobs = preset_jobs(Preset::AppendixCLeakage, &opts);
    let result = run_batch("small", &jobs, Preset::AppendixCLeakage.oracle(), &opts);
    assert_eq!(result.instances, 4);
    for (row, (_, sc)) in result.rows.iter().zip(&jobs) {
        assert!(row.error.is_none(), "{:?}", row.error);
        if row.converged {
            assert!(row.final_check, "seed {}", row.seed);
            // recompute the final state independently and run the detector on it
            let inst = sc.instantiate().unwrap();
            let eng = Engine::new(&inst.graph, inst.rule.clone(), inst.schedule, inst.config.clone()).unwrap();
            let mut st = eng.init_state(&inst.init).unwrap();
            for _ in 0..row.steps_run {
                st = eng.step(&st).unwrap();
            }
            let p = detect_convergence(&st, &inst.graph, sc.epsilon).map(|p| p.id());
            assert_eq!(p, row.converged_path);
        }
    }
}

#[test]
fn seeds_beyond_toml_range_are_rejected() {
    let text = "name = \"big\"\nsteps = 10\nseed = 1\n[graph]\nkind = \"two_path\"\nm = 2\nn = 3\n[schedule]\nkind = \"constant\"\nf0 = 1.0\nb0 = 1.0\n";
    let mut sc = parse_scenario(text).unwrap();
    sc.seed = u64::MAX;
    assert!(sc.validate().is_err());
}
