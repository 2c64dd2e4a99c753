//! Fixtures shared by the benchmarks: an example with its certificate and fixed-point settings.

use slowfast::harness::examples::build_system;
use slowfast::harness::scenario::example_certificate;
use slowfast::harness::{ExampleId, ExampleParams, ScenarioSpec};
use slowfast::slow_manifold::LpConfig;
use slowfast::{ConstantsCertificate, GridDomain, IntegratorConfig, SystemRef};

/// A certified example ready for fixed-point work.
pub struct Fixture {
    pub sys: SystemRef,
    pub cert: ConstantsCertificate,
    pub cfg: LpConfig,
}

/// `id` at `eps` with `points` slow nodes and its scenario defaults otherwise.
pub fn fixture(id: ExampleId, eps: f64, points: usize) -> Fixture {
    let spec = ScenarioSpec::for_example(id);
    let params: ExampleParams = spec.params.clone();
    let (sys, cert) = example_certificate(id, &params, eps, &spec.certify, None).expect("certified example");
    let d = sys.domain();
    let grid = GridDomain::new(d.lower.clone(), d.upper.clone(), vec![points; d.dim()]).expect("grid");
    let cfg = LpConfig::new(&cert, grid, IntegratorConfig::with_step(spec.dt), spec.tol_fixed_point)
        .expect("config")
        .with_halo(sys.as_ref(), 200, spec.seed);
    Fixture { sys, cert, cfg }
}

/// The uncertified example system.
pub fn system(id: ExampleId, eps: f64) -> SystemRef {
    build_system(id, &ExampleParams::for_example(id), eps).expect("example system")
}
