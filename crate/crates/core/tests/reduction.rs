mod common;

use common::{example, solved, with_dh};
use slowfast::harness::examples::analytic_p;
use slowfast::harness::ExampleId;
use slowfast::reduction::{
    attraction_rate_fit, decompose_orbit, dp_finite_difference, dp_point, q_along_orbit, semiconjugacy_residual,
    semiconjugacy_with, straighten, straighten_fields, ReductionConfig, StraightenedSystem,
};
use slowfast::{ConstantsCertificate, FastSlowSystem, GridFunction};

fn l2() -> (StraightenedSystem, ConstantsCertificate) {
    let (sys, cert, cfg) = example(ExampleId::L2, 0.1, 41);
    let grid = cfg.computational_grid();
    let ss = straighten_fields(sys, GridFunction::zeros(grid.clone(), 1), GridFunction::zeros(grid, 1)).unwrap();
    (ss, cert)
}

#[test]
fn straightened_l1_is_linear() {
    let s = solved(ExampleId::L1, 0.1, 21);
    let d = with_dh(&s);
    let ss = straighten(s.sys.clone(), &s.sol, &d).unwrap();
    let mut out = [0.0];
    for (xt, y) in [(0.3, -0.2), (-0.7, 0.4), (0.0, 0.0)] {
        ss.f(&[xt], &[y], &mut out);
        assert!((out[0] + xt).abs() < 1e-8, "{xt} {y}: {}", out[0]);
        ss.g(&[xt], &[y], &mut out);
        assert!((out[0] - 0.1).abs() < 1e-15);
    }
}

#[test]
fn l2_projection_is_closed_form() {
    let (ss, cert) = l2();
    let cfg = ReductionConfig::default();
    for (xi, eta) in [(1.0, 0.0), (0.5, -0.3), (-0.8, 0.2)] {
        let r = q_along_orbit(&ss, &[xi], &[eta], &cert, &cfg).unwrap();
        let want = analytic_p(ExampleId::L2, 0.1, xi, eta).unwrap();
        assert!((r.p[0] - want).abs() < 1e-9, "{xi} {eta}: {} vs {want}", r.p[0]);
        assert!((r.q[0] + 0.1 * xi).abs() < 1e-9);
        assert!(r.e_ratio <= 1.05 * r.e_bound);
    }
    let r = q_along_orbit(&ss, &[0.0], &[0.4], &cert, &cfg).unwrap();
    assert_eq!(r.q, vec![0.0]);
    assert_eq!(r.p, vec![0.4]);
}

#[test]
fn l2_derivative_of_the_projection() {
    let (ss, cert) = l2();
    let cfg = ReductionConfig::default();
    let r = q_along_orbit(&ss, &[0.6], &[0.1], &cert, &cfg).unwrap();
    let dp = dp_point(&ss, &r, &cert, &cfg).unwrap();
    assert!((dp[(0, 0)] - 0.1).abs() < 1e-6 && (dp[(0, 1)] - 1.0).abs() < 1e-6, "{dp}");
    let fd = dp_finite_difference(&ss, &[0.6], &[0.1], &cert, &cfg, 1e-4).unwrap();
    assert!((dp - fd).abs().max() < 1e-5);
    let edge = dp_finite_difference(&ss, &[-0.6], &[1.0], &cert, &cfg, 1e-4).unwrap();
    assert!((edge[(0, 0)] - 0.1).abs() < 1e-5 && (edge[(0, 1)] - 1.0).abs() < 1e-5, "{edge}");
}

#[test]
fn l2_orbit_decomposition() {
    let (ss, cert) = l2();
    let cfg = ReductionConfig::default();
    let r = q_along_orbit(&ss, &[1.0], &[0.0], &cert, &cfg).unwrap();
    let d = decompose_orbit(&ss, &r, &cert, 2.0, &cfg).unwrap();
    let i = d.layer.nearest_index(2.0);
    assert!((d.layer.times[i] - 2.0).abs() < 1e-9);
    assert!((d.layer.fast_at(i)[0] - 0.135335).abs() < 1e-6, "{}", d.layer.fast_at(i)[0]);
    assert!((d.layer.slow_at(i)[0] + 0.0135335).abs() < 1e-6, "{}", d.layer.slow_at(i)[0]);
    assert!(d.reconstruction_error <= 1e-9);
    assert!(d.bound_ratio <= 1.0);
}

#[test]
fn l2_semiconjugacy_and_attraction() {
    let (ss, cert) = l2();
    let cfg = ReductionConfig::default();
    let r = q_along_orbit(&ss, &[1.0], &[0.0], &cert, &cfg).unwrap();
    let s = semiconjugacy_residual(&ss, &r, &cert, 5.0, 10, &cfg).unwrap();
    assert!(s.max_residual <= 1e-6, "{}", s.max_residual);
    let off = semiconjugacy_with(&ss, &r, &[r.p[0] + 0.01], &cert, 5.0, 10, &cfg).unwrap();
    assert!(off.max_residual >= 0.009, "{}", off.max_residual);
    let fit = attraction_rate_fit(&ss, &r, &cert, 10.0, &cfg).unwrap();
    assert!((fit.fit.rate - 1.0).abs() <= 0.02 && fit.fit.r2 >= 0.99, "{:?}", fit.fit);
    let on = q_along_orbit(&ss, &[0.0], &[0.0], &cert, &cfg).unwrap();
    assert!(attraction_rate_fit(&ss, &on, &cert, 10.0, &cfg).is_err());
}

#[test]
fn q1_projection_is_consistent() {
    let s = solved(ExampleId::Q1, 0.1, 41);
    let d = with_dh(&s);
    let ss = straighten(s.sys.clone(), &s.sol, &d).unwrap();
    let cfg = ReductionConfig::default();
    let r = q_along_orbit(&ss, &[0.5], &[-0.5], &s.cert, &cfg).unwrap();
    assert!((r.p[0] + 0.5).abs() < 1e-12, "g independent of x keeps P = eta");
    let sc = semiconjugacy_residual(&ss, &r, &s.cert, 3.0, 6, &cfg).unwrap();
    assert!(sc.max_residual <= 1e-6);
}
