mod common;

use std::sync::Arc;

use common::{cert, plain, Scalar};
use nalgebra::DMatrix;
use slowfast::certify::generator_process;
use slowfast::harness::examples::rotated_jordan_process;
use slowfast::harness::ExampleId;
use slowfast::integrate::{
    bounded_endpoint, cumulative_from_end, flow, slow_ivp, truncation_horizon, variational_flow, DomainPolicy, Driver,
};
use slowfast::{GridDomain, GridFunction, IntegratorConfig};

fn cfg(dt: f64) -> IntegratorConfig {
    IntegratorConfig::with_step(dt)
}

#[test]
fn l2_flow_matches_closed_form() {
    let sys = plain(ExampleId::L2, 0.1);
    let orbit = flow(sys.as_ref(), &[1.0], &[0.0], (0.0, 1.0), &cfg(0.01)).unwrap();
    let (t, x, y) = orbit.last();
    assert!((t - 1.0).abs() < 1e-12);
    assert!((x[0] - (-1.0f64).exp()).abs() < 1e-9);
    assert!((y[0] - 0.1 * (1.0 - (-1.0f64).exp())).abs() < 1e-9);
    assert!((x[0] - 0.367879).abs() < 1e-6 && (y[0] - 0.0632121).abs() < 1e-7);
}

#[test]
fn frozen_and_drifting_slow_states() {
    let frozen = Scalar::new(-2.0, 2.0, |x, y| -x + y.sin(), |_, _| 0.0);
    let o = flow(frozen.as_ref(), &[0.3], &[0.7], (0.0, 5.0), &cfg(0.01)).unwrap();
    assert!((0..o.len()).all(|i| o.slow_at(i)[0] == 0.7));
    let drift = Scalar::new(-2.0, 2.0, |_, _| 0.0, |_, _| 0.25);
    let o = flow(drift.as_ref(), &[0.3], &[-1.0], (0.0, 4.0), &cfg(0.01)).unwrap();
    for i in 0..o.len() {
        assert!((o.slow_at(i)[0] - (-1.0 + 0.25 * o.times[i])).abs() < 1e-12);
        assert_eq!(o.fast_at(i)[0], 0.3);
    }
}

#[test]
fn leaving_the_box_is_an_error() {
    let sys = plain(ExampleId::L1, 0.1);
    assert!(flow(sys.as_ref(), &[0.0], &[0.45], (0.0, 5.0), &cfg(0.01)).is_err());
}

#[test]
fn slow_ivp_backward_on_l1() {
    let sys = plain(ExampleId::L1, 0.1);
    let sigma = GridFunction::zeros(GridDomain::interval(-0.5, 0.5, 11).unwrap(), 1);
    let path = slow_ivp(sys.as_ref(), &sigma, &[0.5], (0.0, -5.0), &cfg(0.01)).unwrap();
    let i = (0..path.len()).find(|&i| (path.times[i] + 5.0).abs() < 1e-9).unwrap();
    assert!(path.slow_at(i)[0].abs() < 1e-12, "{}", path.slow_at(i)[0]);
}

#[test]
fn scalar_processes() {
    let p = generator_process(1, Driver::frozen(vec![0.0]), 0.001, |_, out: &mut DMatrix<f64>| out[(0, 0)] = -1.0);
    let v = p.apply(1.0, 0.0, &[2.0]).unwrap();
    assert!((v[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-9 && (v[0] - 0.735759).abs() < 1e-6);
    assert_eq!(p.apply(3.0, 3.0, &[2.5]).unwrap(), vec![2.5]);
    let eps = 0.1;
    let driver = Driver::Closed { dim: 1, path: Arc::new(move |t, out: &mut [f64]| out[0] = eps * t) };
    let p = generator_process(1, driver, 0.001, |y, out: &mut DMatrix<f64>| out[(0, 0)] = -(1.0 + y[0]));
    let v = p.apply(2.0, 0.0, &[1.0]).unwrap();
    assert!((v[0] - (-2.2f64).exp()).abs() < 1e-9 && (v[0] - 0.110803).abs() < 1e-6);
}

#[test]
fn process_cocycle() {
    let p = rotated_jordan_process(1.5, 0.3, 0.001);
    for (r, s, t) in [(0.0, 0.7, 2.0), (1.0, 1.5, 4.2), (0.3, 2.9, 3.0)] {
        let direct = p.matrix(t, r).unwrap();
        let split = p.matrix(t, s).unwrap() * p.matrix(s, r).unwrap();
        assert!((direct - split).abs().max() < 1e-9);
    }
    assert_eq!(p.matrix(1.3, 1.3).unwrap(), DMatrix::identity(2, 2));
}

#[test]
fn variational_flow_first_order() {
    let sys = plain(ExampleId::L2, 0.1);
    let base = flow(sys.as_ref(), &[1.0], &[0.0], (0.0, 1.0), &cfg(0.01)).unwrap();
    let v = variational_flow(sys.as_ref(), &base, 1, &cfg(0.01)).unwrap();
    let last = v.first.last().unwrap();
    assert!((last[(0, 0)] - (-1.0f64).exp()).abs() < 1e-9);
    assert!((last[(0, 1)]).abs() < 1e-12 && (last[(1, 1)] - 1.0).abs() < 1e-12);

    let q1 = plain(ExampleId::Q1, 0.1);
    let (x0, y0, d) = ([0.4], [0.2], 1e-6);
    let base = flow(q1.as_ref(), &x0, &y0, (0.0, 2.0), &cfg(0.01)).unwrap();
    let v = variational_flow(q1.as_ref(), &base, 1, &cfg(0.01)).unwrap();
    let jac = v.first.last().unwrap();
    let end = |x: f64, y: f64| {
        let o = flow(q1.as_ref(), &[x], &[y], (0.0, 2.0), &cfg(0.01)).unwrap();
        let (_, xe, ye) = o.last();
        [xe[0], ye[0]]
    };
    let (px, mx) = (end(x0[0] + d, y0[0]), end(x0[0] - d, y0[0]));
    let (py, my) = (end(x0[0], y0[0] + d), end(x0[0], y0[0] - d));
    for r in 0..2 {
        let fd = [(px[r] - mx[r]) / (2.0 * d), (py[r] - my[r]) / (2.0 * d)];
        for c in 0..2 {
            let scale = jac[(r, c)].abs().max(1.0);
            assert!((jac[(r, c)] - fd[c]).abs() / scale <= 1e-4, "({r},{c}) {} vs {}", jac[(r, c)], fd[c]);
        }
    }
}

#[test]
fn bounded_endpoint_oracles() {
    let sys = plain(ExampleId::L1, 0.1);
    let sigma = GridFunction::zeros(GridDomain::interval(-3.5, 0.5, 401).unwrap(), 1);
    let x = bounded_endpoint(sys.as_ref(), &sigma, &[0.5], 30.0, &cfg(0.01), DomainPolicy::Extend).unwrap();
    assert!((x[0] - 0.4).abs() < 1e-9, "{}", x[0]);
    let frozen = plain(ExampleId::L1, 0.0);
    let sigma = GridFunction::zeros(GridDomain::interval(-0.5, 0.5, 11).unwrap(), 1);
    for eta in [-0.3, 0.0, 0.2] {
        let x = bounded_endpoint(frozen.as_ref(), &sigma, &[eta], 30.0, &cfg(0.01), DomainPolicy::Strict).unwrap();
        assert!((x[0] - eta).abs() < 1e-9);
    }
    let zero = Scalar::new(-1.0, 1.0, |x, _| -x, |_, _| 0.05);
    let sigma = GridFunction::zeros(GridDomain::interval(-1.0, 1.0, 11).unwrap(), 1);
    let x = bounded_endpoint(zero.as_ref(), &sigma, &[0.9], 10.0, &cfg(0.01), DomainPolicy::Extend).unwrap();
    assert_eq!(x[0], 0.0);
}

#[test]
fn truncation_horizon_grows_as_tolerance_shrinks() {
    let c = cert(1.0, 1.0, 0.5, 0.0, 1.0, 0.0, 2.0);
    let a = truncation_horizon(&c, 1e-6).unwrap();
    let b = truncation_horizon(&c, 1e-9).unwrap();
    assert!(a > 0.0 && b > a);
    assert!((b - a - 1e3f64.ln()).abs() < 1e-9);
}

#[test]
fn cumulative_quadrature_exact_on_cubics() {
    let h = 0.1;
    let f: Vec<f64> = (0..=40).map(|i| (i as f64 * h).powi(3)).collect();
    let c = cumulative_from_end(&f, h);
    for (i, v) in c.iter().enumerate() {
        let t = i as f64 * h;
        let want = (4f64.powi(4) - t.powi(4)) / 4.0;
        assert!((v - want).abs() < 1e-10, "{i}: {v} vs {want}");
    }
}
