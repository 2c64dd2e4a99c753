mod common;

use common::{cert, certify_opts, plain};
use slowfast::certify::{
    certify_system, delta_budget, estimate_process_bound, fit_log_envelope, frozen_coefficient_window, rho_budget,
    sample_drivers, slow_drift_budget, spectral_gap_check, Status,
};
use slowfast::harness::ExampleId;
use slowfast::{GridDomain, GridFunction, IntegratorConfig};

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-12)
}

#[test]
fn exponential_envelope_is_recovered() {
    let taus: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
    let env: Vec<f64> = taus.iter().map(|t| 2.0 * (-0.5 * t).exp()).collect();
    let b = fit_log_envelope(&taus, &env).unwrap();
    assert!(close(b.k, 2.0, 1e-9) && close(b.mu, 0.5, 1e-9), "{b:?}");
    let flat = vec![1.0; taus.len()];
    assert!(fit_log_envelope(&taus, &flat).is_err());
}

#[test]
fn sampled_bound_of_a_stable_scalar_process() {
    let sys = plain(ExampleId::L1, 0.1);
    let drivers = sample_drivers(sys.domain(), 0.1, 3, 7);
    assert_eq!(drivers.len(), 2 + 1 + 3);
    let b = estimate_process_bound(sys, &drivers, 10.0, &IntegratorConfig::with_step(0.01)).unwrap();
    assert!(close(b.k, 1.0, 0.02) && close(b.mu, 1.0, 0.02), "{b:?}");
}

#[test]
fn scalar_example_constants() {
    let l1 = certify_system(plain(ExampleId::L1, 0.1), &certify_opts()).unwrap();
    let c = &l1.certificate;
    assert_eq!((c.k, c.mu), (1.0, 1.0));
    assert!(close(c.m0, 0.5, 1e-6) && c.m1x.abs() < 1e-6 && close(c.m1y, 1.0, 1e-6), "{c:?}");
    assert!(close(c.n0, 0.1, 1e-6) && c.n1.abs() < 1e-9);
    assert!(c.existence_ok() && c.smooth_ok() && c.reduction_ok());
    assert!(c.lambda_ratio() < 1.0);

    let q1 = certify_system(plain(ExampleId::Q1, 0.1), &certify_opts()).unwrap();
    let c = &q1.certificate;
    assert!(close(c.m0, 1.0, 1e-6) && close(c.m1y, 2.0, 1e-6), "{c:?}");
    assert!(close(c.norm_bound(), 3.0, 1e-6));
}

#[test]
fn overrides_and_the_hypothesis_table() {
    let mut opts = certify_opts();
    opts.overrides.insert("N1".into(), 10.0);
    let c = certify_system(plain(ExampleId::L1, 0.1), &opts).unwrap().certificate;
    let table = c.hypothesis_table();
    let status = |name: &str| table.iter().find(|r| r.name == name).unwrap().status;
    assert_eq!(status("H1"), Status::Pass);
    assert_eq!(status("H2"), Status::Pass);
    assert_eq!(status("H3"), Status::Fail);
    assert_eq!(status("S2"), Status::Fail);
    assert!(!c.existence_ok());
    let mut bad = c.clone();
    assert!(bad.set_field("bogus", 1.0).is_err());
    bad.set_field("K", 0.5).unwrap();
    assert!(bad.validate().is_err());
}

#[test]
fn budgets_satisfy_their_inequalities() {
    let c0 = cert(2.0, 1.0, 0.3, 0.1, 0.2, 0.05, 1.0);
    let d = delta_budget(&c0).unwrap();
    assert!(close(d.delta, 2.0 * 2.0 * 0.2 / 0.8, 1e-12));
    assert!(close(d.n1_cap, 0.8 / (2.0 * (d.delta + 1.0)), 1e-12));
    let mut c = c0.clone();
    c.delta = d.delta;
    assert!(c.existence_ok());
    let rho = rho_budget(&c).unwrap();
    c.rho = rho;
    assert!(rho > c.delta && c.smooth_ok());
    assert!(delta_budget(&cert(2.0, 1.0, 0.3, 0.6, 0.2, 0.0, 1.0)).is_err());
}

#[test]
fn windows_and_drift_caps() {
    let l = frozen_coefficient_window(std::f64::consts::E, 1.0, 0.25).unwrap();
    assert!(close(l, 4.0, 1e-12));
    assert!(frozen_coefficient_window(2.0, 1.0, 1.5).is_err());
    let b = slow_drift_budget(1.0, 1.0, 0.5, 2.0).unwrap();
    assert_eq!(b.l, 1.0);
    assert!(close(1.0 * (2.0 * b.n0_cap * b.l + 2.0 * b.m0_cap), 0.5, 1e-12));
}

#[test]
fn spectral_gap_of_critical_branches() {
    let l1 = plain(ExampleId::L1, 0.0);
    let grid = GridDomain::interval(-0.5, 0.5, 11).unwrap();
    let h0 = GridFunction::from_fn(grid, 1, |y, out| out[0] = y[0]);
    let g = spectral_gap_check(l1.as_ref(), &h0, 0.9).unwrap();
    assert!(close(g.max_re, -1.0, 1e-9) && close(g.margin, 0.1, 1e-6) && g.pass, "{g:?}");
    let q1 = plain(ExampleId::Q1, 0.0);
    let grid = GridDomain::interval(-1.0, 1.0, 11).unwrap();
    let h0 = GridFunction::from_fn(grid, 1, |y, out| out[0] = y[0] * y[0]);
    let g = spectral_gap_check(q1.as_ref(), &h0, 1.5).unwrap();
    assert!(close(g.max_re, -1.0, 1e-9) && !g.pass);
}
