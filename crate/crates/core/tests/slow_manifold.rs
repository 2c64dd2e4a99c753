mod common;

use common::{example, solved, with_dh, Scalar};
use slowfast::harness::examples::{analytic_dh, analytic_h};
use slowfast::harness::fit_exponential;
use slowfast::harness::ExampleId;
use slowfast::slow_manifold::{
    central_differences, d2h_solve, eqv_residual, invariance_residual, invariance_residual_from, lambda_ratio, lp_map,
    lp_solve, newton_branch, reduced_flow, LpInit,
};
use slowfast::{GridDomain, GridFunction, IntegratorConfig, Norm, SlowFastError};

fn exact(id: ExampleId, eps: f64, grid: &GridDomain) -> GridFunction {
    GridFunction::from_fn(grid.clone(), 1, |y, out| out[0] = analytic_h(id, eps, y[0]).unwrap())
}

#[test]
fn exact_manifold_is_a_fixed_point() {
    let (sys, cert, cfg) = example(ExampleId::L1, 0.1, 21);
    let h = exact(ExampleId::L1, 0.1, &cfg.computational_grid());
    let next = lp_map(sys.as_ref(), &h, &cert, &cfg).unwrap();
    let box_next = next.restrict(&cfg.grid).unwrap();
    assert!(box_next.sup_dist(&h.restrict(&cfg.grid).unwrap(), &Norm::Sup) < 1e-9);
    let zero = GridFunction::zeros(cfg.computational_grid(), 1);
    let once = lp_map(sys.as_ref(), &zero, &cert, &cfg).unwrap();
    assert!(once.restrict(&cfg.grid).unwrap().sup_dist(&h.restrict(&cfg.grid).unwrap(), &Norm::Sup) < 1e-9);
}

#[test]
fn vanishing_remainder_gives_the_zero_manifold() {
    let (sys, cert, cfg) = example(ExampleId::L2, 0.1, 21);
    let sol = lp_solve(sys.as_ref(), &cert, &cfg, LpInit::Zero).unwrap();
    assert_eq!(sol.h.sup_norm(&Norm::Sup), 0.0);
    assert!(sol.report.converged);
}

#[test]
fn solutions_match_closed_forms() {
    for id in [ExampleId::L1, ExampleId::Q1] {
        let s = solved(id, 0.1, 41);
        let err = s.sol.h.sup_dist(&exact(id, 0.1, &s.cfg.grid), &Norm::Sup);
        assert!(err < 1e-8, "{id:?}: {err}");
        assert!(s.sol.report.converged);
        assert!(s.sol.h.sup_norm(&Norm::Sup) <= s.cert.norm_bound());
    }
}

#[test]
fn starting_iterate_does_not_matter() {
    let s = solved(ExampleId::Q1, 0.1, 21);
    let from_newton = lp_solve(s.sys.as_ref(), &s.cert, &s.cfg, LpInit::Newton).unwrap();
    assert!(from_newton.h.sup_dist(&s.sol.h, &Norm::Sup) < 1e-9);
}

#[test]
fn infeasible_certificate_is_rejected() {
    let (sys, mut cert, cfg) = example(ExampleId::L1, 0.1, 11);
    cert.n1 = 10.0;
    assert!(matches!(lp_solve(sys.as_ref(), &cert, &cfg, LpInit::Zero), Err(SlowFastError::Infeasible(_))));
}

#[test]
fn contraction_ratio_within_theory() {
    let (sys, cert, cfg) = example(ExampleId::Q1, 0.1, 21);
    let grid = cfg.computational_grid();
    let a = GridFunction::from_fn(grid.clone(), 1, |y, out| out[0] = 0.3 * y[0]);
    let b = GridFunction::from_fn(grid, 1, |y, out| out[0] = 0.2 * (y[0] * y[0] - 0.5));
    let r = lambda_ratio(sys.as_ref(), &a, &b, &cert, &cfg).unwrap();
    assert!(r <= 1.05 * cert.lambda_ratio(), "{r} vs {}", cert.lambda_ratio());
}

#[test]
fn critical_branch_at_zero_eps() {
    let (sys, cert, cfg) = example(ExampleId::Q1, 0.0, 21);
    let sol = lp_solve(sys.as_ref(), &cert, &cfg, LpInit::Zero).unwrap();
    let newton = newton_branch(sys.as_ref(), &cfg.grid, &[0.0], 1e-14).unwrap();
    assert!(sol.h.sup_dist(&newton, &Norm::Sup) <= 1e-8);
    let sqrt = Scalar::new(0.5, 2.0, |x, y| -x * x * x + y, |_, _| 0.0);
    let grid = GridDomain::interval(0.5, 2.0, 7).unwrap();
    let b = newton_branch(sqrt.as_ref(), &grid, &[1.0], 1e-14).unwrap();
    for (i, y) in grid.nodes().iter().enumerate() {
        assert!((b.node_value(i)[0] - y[0].cbrt()).abs() < 1e-12);
    }
}

#[test]
fn equivalence_residual_separates_exact_from_perturbed() {
    let s = solved(ExampleId::Q1, 0.1, 41);
    let exact_res = eqv_residual(s.sys.as_ref(), &s.sol.extended, &s.cert, &s.cfg).unwrap();
    assert!(exact_res <= 1e-6, "{exact_res}");
    let mut bumped = s.sol.extended.clone();
    bumped.values.iter_mut().for_each(|v| *v += 0.1);
    let off = eqv_residual(s.sys.as_ref(), &bumped, &s.cert, &s.cfg).unwrap();
    assert!(off > 0.05, "{off}");
}

#[test]
fn graph_is_invariant_and_attracting() {
    let s = solved(ExampleId::L1, 0.1, 41);
    let cfg = IntegratorConfig::with_step(0.01);
    let inv = invariance_residual(s.sys.as_ref(), &s.sol.extended, &[-0.5], 5.0, &cfg).unwrap();
    assert!(inv.max_deviation < 1e-9 && !inv.partial, "{}", inv.max_deviation);
    let off = invariance_residual_from(s.sys.as_ref(), &s.sol.extended, &[0.3], &[-0.5], 8.0, &cfg).unwrap();
    let samples: Vec<(f64, f64)> = off.times.iter().copied().zip(off.deviations.iter().copied()).collect();
    let fit = fit_exponential(&samples, 1e-10).unwrap();
    assert!((fit.rate - 1.0).abs() < 0.02 && fit.r2 > 0.99, "{fit:?}");
}

#[test]
fn first_derivative_matches_closed_forms() {
    let l1 = solved(ExampleId::L1, 0.1, 21);
    let d = with_dh(&l1);
    assert!(d.field.values.iter().all(|v| (v - 1.0).abs() < 1e-8));
    let q1 = solved(ExampleId::Q1, 0.1, 41);
    let d = with_dh(&q1);
    let at_one = d.field.node_value(q1.cfg.grid.num_nodes() - 1)[0];
    assert!((at_one - 1.8).abs() < 1e-6, "{at_one}");
    for (i, y) in q1.cfg.grid.nodes().iter().enumerate() {
        assert!((d.field.node_value(i)[0] - analytic_dh(ExampleId::Q1, 0.1, y[0]).unwrap()).abs() < 1e-6);
    }
    let fd = central_differences(&q1.sol.h);
    assert!(fd.sup_dist(&d.field, &Norm::Sup) < 1e-4);
}

#[test]
fn first_derivative_of_the_critical_branch() {
    let s = solved(ExampleId::Q1, 0.0, 41);
    let d = with_dh(&s);
    for (i, y) in s.cfg.grid.nodes().iter().enumerate() {
        assert!((d.field.node_value(i)[0] - 2.0 * y[0]).abs() < 1e-6);
    }
}

#[test]
fn second_derivative_matches_closed_forms() {
    for (id, want) in [(ExampleId::Q1, 2.0), (ExampleId::L1, 0.0)] {
        let s = solved(id, 0.1, 21);
        let d = with_dh(&s);
        let d2 = d2h_solve(s.sys.as_ref(), &s.sol.extended, &d.extended, &s.cert, &s.cfg).unwrap();
        let err = d2.field.values.iter().fold(0.0f64, |m, v| m.max((v - want).abs()));
        assert!(err < 1e-6, "{id:?}: {err}");
    }
}

#[test]
fn reduced_flow_follows_the_branch() {
    let s = solved(ExampleId::L1, 0.0, 11);
    let sys = slowfast::harness::examples::build_system(ExampleId::L1, &Default::default(), 0.1).unwrap();
    let path = reduced_flow(sys.as_ref(), &s.sol.h, &[-0.5], (0.0, 0.5), 0.1, &IntegratorConfig::with_step(0.01)).unwrap();
    let (t, x, y) = path.last();
    assert!((t - 0.5).abs() < 1e-12 && (y[0] - 0.0).abs() < 1e-12 && (x[0] - y[0]).abs() < 1e-12);
    assert!(reduced_flow(sys.as_ref(), &s.sol.h, &[0.0], (0.0, 1.0), 0.1, &IntegratorConfig::with_step(0.01)).is_err());
    assert!(reduced_flow(sys.as_ref(), &s.sol.h, &[0.0], (0.0, 0.1), 0.0, &IntegratorConfig::with_step(0.01)).is_err());
}
