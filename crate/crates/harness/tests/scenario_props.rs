use std::fs;
use std::path::Path;

use ddpc_core::controller::{self, Variant};
use ddpc_harness::artifacts;
use ddpc_harness::config::{ConstraintSpec, CovarianceSpec, ScenarioConfig};
use ddpc_harness::montecarlo::{self, median, Outcome};
use ddpc_harness::scenario::Scenario;
use ddpc_harness::HarnessError;
use proptest::prelude::*;

fn shipped() -> String {
    fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/paper-sec5.json")).unwrap()
}

fn short(steps: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::builtin();
    cfg.control.steps = steps;
    cfg
}

fn noise_free(mut cfg: ScenarioConfig) -> ScenarioConfig {
    cfg.noise.sigma2 = 0.0;
    cfg.noise.sigma_w = CovarianceSpec::Scale(0.0);
    cfg
}

#[test]
fn shipped_file_is_the_builtin() {
    let mut parsed = ScenarioConfig::parse(&shipped()).unwrap();
    assert_eq!(parsed, ScenarioConfig::builtin());
    parsed.output.dir = "elsewhere".into();
    assert_ne!(parsed, ScenarioConfig::builtin());
}

#[test]
fn builtin_expands_to_benchmark_parameters() {
    let s = Scenario::from_config(ScenarioConfig::builtin()).unwrap();
    assert_eq!((s.control.l0, s.control.lp), (4, 10));
    assert_eq!((s.control.q[(0, 0)], s.control.r[(0, 0)], s.control.p), (20.0, 1.0, 0.95));
    assert_eq!(s.noise.sigma2, 0.01);
    assert_eq!(s.noise.sigma_w, nalgebra::DMatrix::identity(14, 14) * 0.001);
    assert_eq!(s.noise.w_bar.amax(), 0.0);
    assert_eq!(s.excitation.length, 500);
    assert_eq!((s.steps, s.runs), (100, 50));
    assert_eq!(s.reference.len(), 110);
    assert_eq!(s.reference.at(24)[0], 0.0);
    assert_eq!(s.reference.at(25)[0], 1.0);
    assert_eq!(s.reference.at(50)[0], 0.0);
    assert!(matches!(s.ic, controller::Constraints::Unconstrained));
    let prep = s.prepare().unwrap();
    assert_eq!(prep.params.signal_matrix().m(), 487);
}

#[test]
fn partial_files_override_only_what_they_name() {
    let cfg = ScenarioConfig::parse(r#"{"version": 1, "control": {"p": 0.9}, "noise": {"sigma2": 0.02}}"#).unwrap();
    let mut expect = ScenarioConfig::builtin();
    expect.control.p = 0.9;
    expect.noise.sigma2 = 0.02;
    assert_eq!(cfg, expect);
}

fn config_error(text: &str) -> String {
    match ScenarioConfig::parse(text) {
        Err(HarnessError::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn malformed_configs_report_line_numbers() {
    let msg = config_error("{\n  \"version\": 1,\n  \"control\": {\n    \"steps\": \"many\"\n  }\n}");
    assert!(msg.contains("line 4"), "{msg}");
    let msg = config_error("{\n  \"version\": 1,\n  \"controll\": {}\n}");
    assert!(msg.contains("unknown field `controll`") && msg.contains("line 3"), "{msg}");
    let msg = config_error("{\n  \"version\": 1,\n  \"control\": {\"variant\": \"x_ddpc\"}\n}");
    assert!(msg.contains("unknown variant `x_ddpc`") && msg.contains("line 3"), "{msg}");
    let msg = config_error("{\"version\": 1,\n\"control\": {\"q\": [[1, 2], [3]]}}");
    assert!(msg.contains("same length") && msg.contains("line 2"), "{msg}");
    let msg = config_error("{\n\"version\": 1,\n");
    assert!(msg.contains("line 3"), "{msg}");
    assert!(config_error("{\"control\": {}}").contains("missing field `version`"));
    let msg = config_error("{\n\n  \"version\": 7\n}");
    assert!(msg.contains("unsupported version 7 at line 3"), "{msg}");
}

#[test]
fn inconsistent_scenarios_are_validation_errors() {
    let bad = [
        r#"{"version": 1, "control": {"q": [[1, 0], [0, 1]]}}"#,
        r#"{"version": 1, "control": {"p": 1.5}}"#,
        r#"{"version": 1, "constraints": {"output": {"kind": "box", "lower": [0, 0], "upper": [1, 1]}}}"#,
        r#"{"version": 1, "noise": {"sigma_w": [[1]]}}"#,
        r#"{"version": 1, "noise": {"sigma2": -1}}"#,
        r#"{"version": 1, "reference": {"kind": "square", "low": [0], "high": [1], "period": 0}}"#,
        r#"{"version": 1, "data": {"length": 10}}"#,
        r#"{"version": 1, "model": {"a": [[1.5]], "b": [[1]], "c": [[1]], "d": [[0]], "e": [[]]}}"#,
    ];
    for text in bad {
        let err = Scenario::from_config(ScenarioConfig::parse(text).unwrap()).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{text}: {err}");
    }
}

#[test]
fn custom_models_without_disturbance_run() {
    let text = r#"{
        "version": 1,
        "model": {"a": [[0.5]], "b": [[1]], "c": [[1]], "d": [[0]], "e": [[]]},
        "predictor": {"design": "subspace", "l0": 1, "lp": 3},
        "data": {"length": 100},
        "control": {"steps": 10},
        "constraints": {"output": {"kind": "box", "lower": [null], "upper": [2]}, "input": {"kind": "box", "lower": [-1], "upper": [1]}}
    }"#;
    let s = Scenario::from_config(ScenarioConfig::parse(text).unwrap()).unwrap();
    assert_eq!(s.model.n_w(), 0);
    let prep = s.prepare().unwrap();
    let log = prep.run(Variant::SDdpc, &prep.streams(0).unwrap()).unwrap();
    assert_eq!(log.rows.len(), 10);
    assert!(log.rows.iter().all(|r| r.u[0].abs() <= 1.0 + 1e-7));
}

#[test]
fn zero_noise_variants_share_trajectories() {
    let mut cfg = noise_free(short(30));
    cfg.constraints.output = ConstraintSpec::None;
    let s = Scenario::from_config(cfg).unwrap();
    let prep = s.prepare().unwrap();
    let mc = montecarlo::run_montecarlo(&prep, &Variant::ALL, 1).unwrap();
    let logs: Vec<_> = mc.records.iter().map(|r| r.outcome.log().unwrap()).collect();
    for log in &logs[1..] {
        for (a, b) in log.rows.iter().zip(&logs[0].rows) {
            assert!((&a.u - &b.u).amax() <= 1e-8, "{} t = {}", log.variant.as_str(), a.t);
            assert!((&a.y0 - &b.y0).amax() <= 1e-8);
            assert_eq!(a.y, a.y0);
        }
    }
}

#[test]
fn variants_consume_identical_streams() {
    let s = Scenario::from_config(short(5)).unwrap();
    let prep = s.prepare().unwrap();
    let mc = montecarlo::run_montecarlo(&prep, &Variant::ALL, 3).unwrap();
    for run in 0..3 {
        let digests: Vec<&str> = mc
            .records
            .iter()
            .filter(|r| r.run == run)
            .map(|r| r.outcome.log().unwrap().stream_digest.as_str())
            .collect();
        assert_eq!(digests.len(), 3);
        assert!(digests.iter().all(|d| *d == digests[0]));
        assert_eq!(digests[0], prep.streams(run as u64).unwrap().digest());
    }
    let runs: Vec<usize> = mc.records.iter().map(|r| r.run).collect();
    assert_eq!(runs, [0, 1, 2, 0, 1, 2, 0, 1, 2]);
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn aggregates_are_recomputable_from_run_logs() {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::from_config(short(40)).unwrap();
    let prep = s.prepare().unwrap();
    let mc = montecarlo::run_montecarlo(&prep, &Variant::ALL, 5).unwrap();
    artifacts::write_montecarlo(dir.path(), &s, &mc).unwrap();
    assert!(mc.records.iter().all(|r| matches!(r.outcome, Outcome::Completed { .. })));

    let summaries = montecarlo::summarize(&mc, &s.oc);
    for (v, summary) in Variant::ALL.into_iter().zip(&summaries) {
        let mut costs = Vec::new();
        let mut violations = Vec::new();
        let mut filt = Vec::new();
        for run in 0..5 {
            let path = artifacts::run_dir(dir.path(), v).join(format!("run_{run:04}.csv"));
            let trace = path.with_file_name(format!("run_{run:04}_filter.csv"));
            let log = artifacts::read_log(&path, v.filtered().then_some(trace.as_path()), v, &s).unwrap();
            let original = mc.records.iter().find(|r| r.variant == v && r.run == run).unwrap();
            let m = controller::metrics(&log, &s.oc, &s.control_for(v));
            assert_eq!(Some(&m), original.outcome.metrics());
            costs.push(m.true_total_cost);
            violations.push(m.total_violation);
            filt.extend(m.filter_rmse);
        }
        assert_eq!(median(&costs), summary.median_cost);
        assert_eq!(median(&violations), summary.median_violation);
        assert_eq!(median(&filt), summary.median_filter_rmse);
    }

    let summary_csv = read(&dir.path().join("summary.csv"));
    assert_eq!(summary_csv.lines().count(), 4);
    let median_field = summary_csv.lines().nth(3).unwrap().split(',').nth(3).unwrap().to_string();
    assert_eq!(median_field, artifacts::fmt(summaries[2].median_cost.unwrap()));

    let paths = artifacts::report(dir.path()).unwrap();
    assert_eq!(read(&paths[2]), read(&dir.path().join("aggregate.csv")));
    let aggregate = read(&dir.path().join("aggregate.csv"));
    assert_eq!(aggregate.lines().count(), 1 + 3 * 5 * 2);
    let traj = read(&paths[0]);
    assert_eq!(traj.lines().next().unwrap(), "variant,run,t,u,r,y0,y,lower,upper");
    assert_eq!(traj.lines().count(), 1 + 3 * 40);
    let filt = read(&paths[1]);
    assert_eq!(filt.lines().next().unwrap(), "variant,run,t,measured,filtered,true");
    assert_eq!(filt.lines().count(), 1 + 2 * 40);
}

#[test]
fn report_on_empty_and_single_run_sets() {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::from_config(short(5)).unwrap();
    let prep = s.prepare().unwrap();
    let mc = montecarlo::run_montecarlo(&prep, &Variant::ALL, 0).unwrap();
    artifacts::write_montecarlo(dir.path(), &s, &mc).unwrap();
    let paths = artifacts::report(dir.path()).unwrap();
    for (p, head) in paths.iter().zip([
        "variant,run,t,u,r,y0,y,lower,upper",
        "variant,run,t,measured,filtered,true",
        "variant,run,metric,value",
    ]) {
        assert_eq!(read(p), format!("{head}\n"));
    }
    assert_eq!(read(&dir.path().join("aggregate.csv")), "variant,run,metric,value\n");

    let mc = montecarlo::run_montecarlo(&prep, &Variant::ALL, 1).unwrap();
    artifacts::write_montecarlo(dir.path(), &s, &mc).unwrap();
    let paths = artifacts::report(dir.path()).unwrap();
    let rows: Vec<String> = read(&paths[2]).lines().skip(1).map(|l| l.splitn(4, ',').take(3).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(
        rows,
        [
            "n_ddpc,0,cost",
            "n_ddpc,0,violation",
            "kf_ddpc,0,cost",
            "kf_ddpc,0,violation",
            "s_ddpc,0,cost",
            "s_ddpc,0,violation"
        ]
    );

    let missing = artifacts::report(&dir.path().join("absent")).unwrap_err();
    assert_eq!(missing.exit_code(), 2);
}

#[test]
fn thread_cap_does_not_change_results() {
    let s = Scenario::from_config(short(10)).unwrap();
    let prep = s.prepare().unwrap();
    let a = montecarlo::run_montecarlo(&prep, &[Variant::KfDdpc], 4).unwrap();
    std::env::set_var(montecarlo::THREADS_ENV, "1");
    let b = montecarlo::run_montecarlo(&prep, &[Variant::KfDdpc], 4).unwrap();
    std::env::remove_var(montecarlo::THREADS_ENV);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.outcome.log(), y.outcome.log());
    }
}

#[test]
fn medians_of_known_samples() {
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
}

fn arb_config() -> impl Strategy<Value = ScenarioConfig> {
    (
        0.5..0.99f64,
        any::<u64>(),
        1usize..200,
        prop::option::of(-2.0..0.0f64),
        0.1..3.0f64,
        prop::sample::select(Variant::ALL.to_vec()),
        prop::collection::vec(-1.0..1.0f64, 14),
        any::<bool>(),
    )
        .prop_map(|(p, seed, steps, lo, hi, variant, w_bar, full)| {
            let mut cfg = ScenarioConfig::builtin();
            cfg.control.p = p;
            cfg.control.variant = variant;
            cfg.control.steps = steps;
            cfg.monte_carlo.base_seed = seed;
            cfg.constraints.output = ConstraintSpec::Box {
                lower: vec![lo],
                upper: vec![Some(hi)],
            };
            cfg.noise.w_bar = Some(w_bar);
            if full {
                cfg.noise.sigma_w = CovarianceSpec::Full(ddpc_harness::config::Matrix(
                    nalgebra::DMatrix::identity(14, 14) * p / 3.0,
                ));
            }
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trip_is_idempotent(cfg in arb_config()) {
        let text = cfg.to_json();
        let back = ScenarioConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json(), text);
        prop_assert!(Scenario::from_config(back).is_ok());
    }
}
