use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slowfast::harness::scenario::random_queries;
use slowfast::harness::{build_system, fit_exponential, run_scenario, Check, ExampleId, ExampleParams, ScenarioSpec, StageStatus};
use slowfast::SlowFastError;

fn small(id: ExampleId) -> ScenarioSpec {
    let mut spec = ScenarioSpec::for_example(id);
    spec.grid = 21;
    spec.eps.truncate(1);
    spec.random_queries = 3;
    spec.contraction_pairs = 2;
    spec
}

#[test]
fn exponential_fits() {
    let s: Vec<(f64, f64)> = (0..50).map(|i| i as f64 * 0.2).map(|t| (t, 0.5 * (-0.7 * t).exp())).collect();
    let f = fit_exponential(&s, 0.0).unwrap();
    assert!((f.rate - 0.7).abs() < 1e-10 && (f.prefactor - 0.5).abs() < 1e-10 && f.r2 > 0.999 && !f.flat);
    let floor = fit_exponential(&s, 0.1).unwrap();
    assert!(floor.used < s.len() && (floor.rate - 0.7).abs() < 1e-10);
    assert!(matches!(fit_exponential(&s[..4], 0.0), Err(SlowFastError::Underdetermined(_))));
    let flat: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 2.0)).collect();
    assert!(fit_exponential(&flat, 0.0).unwrap().flat);
}

#[test]
fn infeasible_override_stops_at_the_fixed_point() {
    let mut spec = small(ExampleId::L1);
    spec.certify.overrides.insert("N1".into(), 10.0);
    let report = run_scenario(&spec);
    let stage = report.stage("lp_solve").expect("lp_solve stage");
    assert_eq!(stage.status, StageStatus::Error);
    assert_eq!(stage.metrics["error"], "infeasible");
    assert_eq!(report.exit_code(), 2);
}

#[test]
fn l2_scenario_passes_and_is_reproducible() {
    let mut spec = small(ExampleId::L2);
    spec.checks = vec![Check::Equivalence, Check::ENorm, Check::Semiconjugacy];
    let a = run_scenario(&spec);
    assert!(a.passed(), "{:#?}", a.stages);
    assert_eq!(a.exit_code(), 0);
    let b = run_scenario(&spec);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let red = a.stage("reduction").unwrap();
    assert_eq!(red.metrics["query_count_ok"], true);
}

#[test]
fn scenario_json_is_strict() {
    let spec = ScenarioSpec::from_json(r#"{"system": "Q1", "eps": [0.2], "grid": 11}"#).unwrap();
    assert_eq!(spec.system, ExampleId::Q1);
    assert_eq!((spec.eps.clone(), spec.grid), (vec![0.2], 11));
    assert_eq!(spec.dt, ScenarioSpec::for_example(ExampleId::Q1).dt);
    assert!(ScenarioSpec::from_json(r#"{"system": "Q1", "grdi": 11}"#).is_err());
    assert!(ScenarioSpec::from_json(r#"{"system": "Q9"}"#).is_err());
}

#[test]
fn random_queries_are_seeded_and_inside_the_box() {
    let sys = build_system(ExampleId::Q1, &ExampleParams::for_example(ExampleId::Q1), 0.1).unwrap();
    let a = random_queries(sys.as_ref(), 20, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
    let b = random_queries(sys.as_ref(), 20, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(a, b);
    assert_eq!(a.len(), 20);
    for q in &a {
        assert!(q.xi[0].abs() <= 0.5 && sys.domain().contains(&q.eta));
    }
}
