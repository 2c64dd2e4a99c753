#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DMatrix;
use slowfast::certify::CertifyOptions;
use slowfast::harness::examples::build_system;
use slowfast::harness::scenario::example_certificate;
use slowfast::harness::{ExampleId, ExampleParams, ScenarioSpec};
use slowfast::slow_manifold::{dh_solve, lp_solve, DerivativeSolution, LpConfig, LpInit, LpSolution};
use slowfast::{BoxDomain, ConstantsCertificate, FastSlowSystem, GridDomain, IntegratorConfig, Norm, SystemRef};

type Field = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Scalar system `x' = f(x, y)`, `y' = g(x, y)` with `A0(y) = D_x f(0, y)` by central differences.
pub struct Scalar {
    pub f: Field,
    pub g: Field,
    pub domain: BoxDomain,
    pub norm: Norm,
}

impl Scalar {
    pub fn new(lo: f64, hi: f64, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static, g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> SystemRef {
        Arc::new(Self { f: Arc::new(f), g: Arc::new(g), domain: BoxDomain::new(vec![lo], vec![hi]).unwrap(), norm: Norm::Euclidean })
    }
}

impl FastSlowSystem for Scalar {
    fn m(&self) -> usize {
        1
    }
    fn n(&self) -> usize {
        1
    }
    fn fast_norm(&self) -> &Norm {
        &self.norm
    }
    fn domain(&self) -> &BoxDomain {
        &self.domain
    }
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = (self.f)(x[0], y[0]);
    }
    fn g(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = (self.g)(x[0], y[0]);
    }
    fn a0(&self, y: &[f64], out: &mut DMatrix<f64>) {
        let d = 1e-6;
        out[(0, 0)] = ((self.f)(d, y[0]) - (self.f)(-d, y[0])) / (2.0 * d);
    }
}

/// A certified example with its fixed-point settings on `points` slow nodes.
pub struct Solved {
    pub sys: SystemRef,
    pub cert: ConstantsCertificate,
    pub cfg: LpConfig,
    pub sol: LpSolution,
}

pub fn config(sys: &dyn FastSlowSystem, cert: &ConstantsCertificate, points: usize, dt: f64) -> LpConfig {
    let d = sys.domain();
    let grid = GridDomain::new(d.lower.clone(), d.upper.clone(), vec![points; d.dim()]).unwrap();
    LpConfig::new(cert, grid, IntegratorConfig::with_step(dt), 1e-10).unwrap().with_halo(sys, 200, 0)
}

pub fn example(id: ExampleId, eps: f64, points: usize) -> (SystemRef, ConstantsCertificate, LpConfig) {
    let spec = ScenarioSpec::for_example(id);
    let (sys, cert) = example_certificate(id, &spec.params, eps, &spec.certify, None).unwrap();
    let cfg = config(sys.as_ref(), &cert, points, spec.dt);
    (sys, cert, cfg)
}

pub fn solved(id: ExampleId, eps: f64, points: usize) -> Solved {
    let (sys, cert, cfg) = example(id, eps, points);
    let sol = lp_solve(sys.as_ref(), &cert, &cfg, LpInit::Zero).unwrap();
    Solved { sys, cert, cfg, sol }
}

pub fn with_dh(s: &Solved) -> DerivativeSolution {
    dh_solve(s.sys.as_ref(), &s.sol.extended, &s.cert, &s.cfg).unwrap()
}

pub fn plain(id: ExampleId, eps: f64) -> SystemRef {
    build_system(id, &ExampleParams::for_example(id), eps).unwrap()
}

pub fn certify_opts() -> CertifyOptions {
    CertifyOptions::default()
}

/// Certificate with the given constants and budgets from the closed forms.
pub fn cert(k: f64, mu: f64, m0: f64, m1x: f64, m1y: f64, n1: f64, delta: f64) -> ConstantsCertificate {
    ConstantsCertificate::supplied(k, mu, m0, m1x, m1y, 0.0, n1, delta, delta)
}
