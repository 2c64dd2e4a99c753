//! Scenario runs: certify, solve for `h` and its derivatives, straighten, query the
//! reduction map and evaluate a checklist, with every stage error captured in the report.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::examples::{
    analytic_d2h, analytic_dh, analytic_h, analytic_p, build_system, default_x_radius, ExampleId, ExampleParams,
};
use crate::certify::{certify_system, spectral_gap_check, CertifyOptions, ConstantsCertificate, Status};
use crate::error::{Result, SlowFastError};
use crate::integrate::IntegratorConfig;
use crate::io;
use crate::model::{FastSlowSystem, GridDomain, GridFunction, SystemRef};
use crate::reduction::{
    attraction_rate_fit, decompose_orbit, dp_finite_difference, dp_point, interpolation_error_estimate, q_along_orbit,
    semiconjugacy_residual,
    straighten_fields, ReductionConfig, ReductionResult, StraightenedSystem,
};
use crate::slow_manifold::{
    central_differences, d2h_solve, dh_solve, eqv_residual, invariance_residual, lambda_ratio, lp_solve,
    newton_branch, LpConfig, LpInit, LpSolution,
};

/// Verifications a scenario can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// Closed-form `h`, `Dh`, `D^2 h`, `P` where available.
    Oracle,
    /// Measured `Lambda` ratios on random pairs in the ball against the theoretical ratio.
    Contraction,
    /// `|h|_inf <= K M0 / mu + K M1y / (mu - K M1x)` with 1% slack.
    NormBound,
    /// Gap to the `eps = 0` sheet halves with `eps`.
    Continuity,
    /// `Dh` against central differences of `h`.
    Derivatives,
    /// `D^2 h` against central differences of `Dh`.
    SecondDerivative,
    /// Spectrum of `D_xF` along the `eps = 0` sheet.
    SpectralGap,
    /// Orbits started on the graph stay on it.
    Invariance,
    /// Residual of the integral equation and its response to a perturbation.
    Equivalence,
    /// `|Q| / |xi|` against its bound over the queries.
    ENorm,
    /// Decay rate of the distance to the projected orbit.
    Attraction,
    /// `P(orbit(t))` follows the slow flow on the manifold.
    Semiconjugacy,
    /// Layer part of the orbit decomposition obeys its bound.
    Decomposition,
    /// `DP` against central differences of `P`.
    DpConsistency,
}

/// Reduction query `(xi, eta)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
}

/// Scenario description; unset fields take per-example defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub name: String,
    pub system: ExampleId,
    pub params: ExampleParams,
    /// Working `eps` first; further values feed the continuity check.
    pub eps: Vec<f64>,
    /// Grid points per slow axis.
    pub grid: usize,
    pub dt: f64,
    /// Overrides the truncation horizon of the fixed point.
    pub horizon: Option<f64>,
    pub tol_fixed_point: f64,
    pub max_iters: usize,
    /// Highest derivative of `h` to compute (0, 1 or 2).
    pub derivative: u8,
    pub certify: CertifyOptions,
    /// Use this certificate instead of estimating one (overrides still apply).
    pub certificate: Option<ConstantsCertificate>,
    pub tol_q: f64,
    pub queries: Vec<Query>,
    /// Extra seeded random queries.
    pub random_queries: usize,
    /// Query used for the orbit checks; chosen automatically when absent.
    pub probe: Option<Query>,
    /// Orbit window of the attraction, semiconjugacy and decomposition checks.
    pub t_max: f64,
    /// Random function pairs for the contraction check.
    pub contraction_pairs: usize,
    /// Empty selects the example's default checklist.
    pub checks: Vec<Check>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::for_example(ExampleId::L1)
    }
}

impl ScenarioSpec {
    /// Default scenario of an example.
    pub fn for_example(id: ExampleId) -> Self {
        let params = ExampleParams::for_example(id);
        let (eps, grid, dt, derivative, t_max) = match id {
            ExampleId::L1 => (vec![0.1, 0.05, 0.025], 101, 0.01, 1, 8.0),
            ExampleId::Q1 => (vec![0.1, 0.05, 0.025], 101, 0.01, 2, 10.0),
            ExampleId::L2 => (vec![0.1], 101, 0.01, 1, 10.0),
            ExampleId::VdpCut => (vec![0.05], 101, 0.01, 1, 4.0),
            ExampleId::NF1 => (vec![0.05], 21, 0.02, 1, 10.0),
        };
        let mut certify = CertifyOptions::default();
        certify.sampling.x_radius = default_x_radius(id, &params);
        Self {
            name: format!("{id}-default"),
            system: id,
            params,
            eps,
            grid,
            dt,
            horizon: None,
            tol_fixed_point: 1e-9,
            max_iters: 200,
            derivative,
            certify,
            certificate: None,
            tol_q: 1e-10,
            queries: vec![],
            random_queries: 20,
            probe: None,
            t_max,
            contraction_pairs: 20,
            checks: vec![],
            seed: 0,
            out_dir: None,
        }
    }

    /// Parses JSON and fills example-dependent defaults for fields the document leaves out.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| SlowFastError::Argument(e.to_string()))?;
        let id: ExampleId = match raw.get("system") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| SlowFastError::Argument(e.to_string()))?,
            None => ExampleId::L1,
        };
        let mut base = serde_json::to_value(Self::for_example(id)).map_err(|e| SlowFastError::Argument(e.to_string()))?;
        let obj = raw.as_object().ok_or_else(|| SlowFastError::Argument("scenario must be a JSON object".into()))?;
        let base_obj = base.as_object_mut().expect("spec serializes to an object");
        for (k, v) in obj {
            if !base_obj.contains_key(k) {
                return Err(SlowFastError::Argument(format!("unknown scenario field '{k}'")));
            }
            base_obj.insert(k.clone(), v.clone());
        }
        serde_json::from_value(base).map_err(|e| SlowFastError::Argument(e.to_string()))
    }

    /// The checklist to run.
    pub fn effective_checks(&self) -> Vec<Check> {
        if !self.checks.is_empty() {
            let mut c = self.checks.clone();
            c.sort();
            c.dedup();
            return c;
        }
        let id = self.system;
        let mut c = vec![
            Check::NormBound,
            Check::Equivalence,
            Check::Invariance,
            Check::ENorm,
            Check::Attraction,
            Check::Semiconjugacy,
            Check::Decomposition,
        ];
        if analytic_h(id, 0.0, 0.0).is_some() {
            c.push(Check::Oracle);
        }
        if id != ExampleId::NF1 {
            c.push(Check::Contraction);
            c.push(Check::DpConsistency);
        }
        if matches!(id, ExampleId::L1 | ExampleId::Q1) && self.eps.len() >= 2 {
            c.push(Check::Continuity);
        }
        if matches!(id, ExampleId::NF1 | ExampleId::VdpCut) {
            c.push(Check::SpectralGap);
        }
        if self.derivative >= 1 {
            c.push(Check::Derivatives);
        }
        if self.derivative >= 2 {
            c.push(Check::SecondDerivative);
        }
        c.sort();
        c
    }

    fn working_eps(&self) -> f64 {
        self.eps.first().copied().unwrap_or(0.1)
    }

    fn box_grid(&self, sys: &dyn FastSlowSystem) -> Result<GridDomain> {
        let d = sys.domain();
        GridDomain::new(d.lower.clone(), d.upper.clone(), vec![self.grid; d.dim()])
    }
}

/// Outcome of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pass,
    Fail,
    Error,
    Skipped,
}

/// One stage of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub status: StageStatus,
    pub metrics: BTreeMap<String, Value>,
}

impl StageReport {
    fn new(name: &str) -> Self {
        Self { name: name.into(), status: StageStatus::Pass, metrics: BTreeMap::new() }
    }

    fn metric(&mut self, key: &str, v: impl Serialize) {
        self.metrics.insert(key.into(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    /// Records a pass/fail sub-check; any failure fails the stage.
    fn verdict(&mut self, key: &str, ok: bool) {
        self.metric(&format!("{key}_ok"), ok);
        if !ok && self.status == StageStatus::Pass {
            self.status = StageStatus::Fail;
        }
    }

    fn error(name: &str, e: &SlowFastError) -> Self {
        let mut s = Self::new(name);
        s.status = StageStatus::Error;
        s.metric("error", e.kind());
        s.metric("message", e.to_string());
        s.metric("exit_code", e.exit_code());
        s
    }

    fn skipped(name: &str, reason: &str) -> Self {
        let mut s = Self::new(name);
        s.status = StageStatus::Skipped;
        s.metric("reason", reason);
        s
    }
}

/// Structured scenario report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub system: String,
    pub seed: u64,
    pub certificate: Option<ConstantsCertificate>,
    pub stages: Vec<StageReport>,
    /// Written files, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl ScenarioReport {
    /// Stage by name.
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// No stage failed or errored.
    pub fn passed(&self) -> bool {
        self.stages.iter().all(|s| matches!(s.status, StageStatus::Pass | StageStatus::Skipped))
    }

    /// 0 when passed, the first stage error's code otherwise, 4 for failed checks.
    pub fn exit_code(&self) -> i32 {
        for s in &self.stages {
            if s.status == StageStatus::Error {
                return s.metrics.get("exit_code").and_then(Value::as_i64).unwrap_or(4) as i32;
            }
        }
        if self.passed() {
            0
        } else {
            4
        }
    }
}

/// Certificate of an example at `eps` with the scenario's options.
pub fn example_certificate(
    id: ExampleId,
    params: &ExampleParams,
    eps: f64,
    opts: &CertifyOptions,
    supplied: Option<&ConstantsCertificate>,
) -> Result<(SystemRef, ConstantsCertificate)> {
    let sys = build_system(id, params, eps)?;
    let cert = match supplied {
        Some(c) => {
            let mut c = c.clone();
            for (k, v) in &opts.overrides {
                c.set_field(k, *v)?;
            }
            c
        }
        None => certify_system(sys.clone(), opts)?.certificate,
    };
    Ok((sys, cert))
}

fn lp_config(spec: &ScenarioSpec, sys: &dyn FastSlowSystem, cert: &ConstantsCertificate) -> Result<LpConfig> {
    let mut cfg = LpConfig::new(cert, spec.box_grid(sys)?, IntegratorConfig::with_step(spec.dt), spec.tol_fixed_point)?;
    if let Some(t) = spec.horizon {
        cfg.horizon = t;
    }
    cfg.max_iters = spec.max_iters;
    Ok(cfg.with_halo(sys, 200, spec.seed))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Random functions in the ball `{ sup + Lip <= r }` on `grid`: sums of a constant and a
/// sine per component, scaled to 90% of the radius.
fn random_ball_function(grid: &GridDomain, dim: usize, radius: f64, rng: &mut ChaCha8Rng) -> GridFunction {
    let n = grid.dim();
    let width: f64 = (0..n).map(|k| grid.upper[k] - grid.lower[k]).fold(0.0, f64::max).max(1e-12);
    let params: Vec<(f64, f64, Vec<f64>, f64)> = (0..dim)
        .map(|_| {
            let c = rng.gen_range(-1.0..1.0);
            let a = rng.gen_range(-1.0..1.0);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..3.0) / width).collect();
            (c, a, w, rng.gen_range(0.0..6.3))
        })
        .collect();
    let raw = GridFunction::from_fn(grid.clone(), dim, |y, out| {
        for (i, (c, a, w, ph)) in params.iter().enumerate() {
            let arg: f64 = y.iter().zip(w).map(|(v, ww)| v * ww).sum::<f64>() + ph;
            out[i] = c + a * arg.sin();
        }
    });
    // sup and Lipschitz bounds of the closed form, Euclidean over components.
    let sup = params.iter().map(|(c, a, _, _)| (c.abs() + a.abs()).powi(2)).sum::<f64>().sqrt();
    let lip = params.iter().map(|(_, a, w, _)| (a.abs() * w.iter().sum::<f64>()).powi(2)).sum::<f64>().sqrt();
    let scale = 0.9 * radius / (sup + 1.1 * lip).max(1e-300);
    GridFunction { values: raw.values.iter().map(|v| v * scale).collect(), ..raw }
}

struct Ctx {
    sys: SystemRef,
    cert: ConstantsCertificate,
    cfg: LpConfig,
}

/// Runs the scenario; stage errors are recorded, never propagated.
pub fn run_scenario(spec: &ScenarioSpec) -> ScenarioReport {
    let checks = spec.effective_checks();
    let has = |c: Check| checks.contains(&c);
    let id = spec.system;
    let eps = spec.working_eps();
    let mut report = ScenarioReport {
        scenario: spec.name.clone(),
        system: id.to_string(),
        seed: spec.seed,
        certificate: None,
        stages: vec![],
        artifacts: vec![],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // certify
    let (sys, cert) = match example_certificate(id, &spec.params, eps, &spec.certify, spec.certificate.as_ref()) {
        Ok(v) => v,
        Err(e) => {
            report.stages.push(StageReport::error("certify", &e));
            return report;
        }
    };
    let mut st = StageReport::new("certify");
    st.metric("eps", eps);
    for row in cert.hypothesis_table() {
        st.metric(&row.name, row.status);
    }
    st.metric("lambda_ratio", cert.lambda_ratio());
    st.metric("ball_radius", cert.ball_radius());
    let required = ["H1", "H2", "H3"];
    let ok = cert.hypothesis_table().iter().filter(|r| required.contains(&r.name.as_str())).all(|r| r.status == Status::Pass);
    st.verdict("existence", ok);
    report.certificate = Some(cert.clone());
    report.stages.push(st);

    if has(Check::SpectralGap) {
        report.stages.push(spectral_stage(spec));
    }

    // lp_solve
    let cfg = match lp_config(spec, sys.as_ref(), &cert) {
        Ok(c) => c,
        Err(e) => {
            report.stages.push(StageReport::error("lp_solve", &e));
            return finish(spec, report);
        }
    };
    let ctx = Ctx { sys: sys.clone(), cert: cert.clone(), cfg };
    let sol = match lp_solve(sys.as_ref(), &cert, &ctx.cfg, LpInit::Zero) {
        Ok(s) => s,
        Err(e) => {
            report.stages.push(StageReport::error("lp_solve", &e));
            return finish(spec, report);
        }
    };
    report.stages.push(lp_stage(spec, &ctx, &sol, has(Check::NormBound), has(Check::Oracle)));

    if has(Check::Contraction) {
        report.stages.push(guard("contraction", || contraction_stage(spec, &ctx, &mut rng)));
    }
    if has(Check::Equivalence) {
        report.stages.push(guard("equivalence", || equivalence_stage(&ctx, &sol)));
    }
    if has(Check::Invariance) {
        report.stages.push(guard("invariance", || invariance_stage(spec, &ctx, &sol)));
    }
    if has(Check::Continuity) {
        report.stages.push(guard("continuity", || continuity_stage(spec)));
    }

    // derivatives
    let mut dh_field: Option<GridFunction> = None;
    let mut dh_box: Option<GridFunction> = None;
    if spec.derivative >= 1 {
        match dh_solve(sys.as_ref(), &sol.extended, &cert, &ctx.cfg) {
            Ok(dh) => {
                let mut st = StageReport::new("dh_solve");
                st.metric("iterations", dh.report.iterates.len());
                st.metric("measured_ratio", dh.report.measured_ratio);
                st.metric("theoretical_ratio", dh.report.theoretical_ratio);
                let sup = dh.field.sup_op_norm(sys.m(), sys.n(), &crate::model::Norm::Sup, sys.fast_norm());
                st.metric("sup_dh", sup);
                st.metric("dh_bound", cert.dh_bound());
                if has(Check::Derivatives) {
                    let fd = central_differences(&sol.h);
                    let err = max_abs_diff(&dh.field.values, &fd.values);
                    st.metric("fd_error", err);
                    st.verdict("fd", err <= 1e-4);
                }
                if has(Check::Oracle) && sys.n() == 1 && sys.m() == 1 {
                    let err = oracle_error(&dh.field, |y| analytic_dh(id, eps, y));
                    if let Some(err) = err {
                        st.metric("oracle_error", err);
                        st.verdict("oracle", err <= 1e-6);
                    }
                }
                dh_field = Some(dh.extended.clone());
                dh_box = Some(dh.field.clone());
                report.stages.push(st);
                if spec.derivative >= 2 && !sys.has_hessians() {
                    report.stages.push(StageReport::skipped("d2h_solve", "system supplies no Hessians"));
                } else if spec.derivative >= 2 {
                    report.stages.push(guard("d2h_solve", || {
                        d2h_stage(spec, &ctx, &sol, &dh.extended, &dh.field, has(Check::SecondDerivative), has(Check::Oracle))
                    }));
                }
            }
            Err(e) => report.stages.push(StageReport::error("dh_solve", &e)),
        }
    }
    if let (Some(dh), Some(ob)) = (&dh_box, spec.out_dir.as_ref()) {
        let path = ob.join("h.csv");
        if io::fields_csv(&[("h", &sol.h), ("dh", dh)]).and_then(|s| io::write_atomic(&path, s.as_bytes())).is_ok() {
            report.artifacts.push(artifact_name(&path));
        }
    } else if let Some(ob) = spec.out_dir.as_ref() {
        let path = ob.join("h.csv");
        if io::fields_csv(&[("h", &sol.h)]).and_then(|s| io::write_atomic(&path, s.as_bytes())).is_ok() {
            report.artifacts.push(artifact_name(&path));
        }
    }

    // straighten and reduce
    let dh_ext = dh_field.unwrap_or_else(|| central_differences(&sol.extended));
    let ss = match straighten_fields(sys.clone(), sol.extended.clone(), dh_ext) {
        Ok(s) => s,
        Err(e) => {
            report.stages.push(StageReport::error("straighten", &e));
            return finish(spec, report);
        }
    };
    report.stages.push(straighten_stage(&ss, &ctx));
    let rcfg = ReductionConfig { integrator: IntegratorConfig::with_step(spec.dt), tol_q: spec.tol_q, max_iters: 200 };
    report.stages.push(guard("reduction", || reduction_stage(spec, &ss, &ctx, &rcfg, &mut rng, has(Check::ENorm), has(Check::Oracle))));

    let orbit_checks = [Check::Attraction, Check::Semiconjugacy, Check::Decomposition, Check::DpConsistency];
    if orbit_checks.iter().any(|c| has(*c)) {
        match choose_probe(spec, &ss, &ctx, &rcfg) {
            Ok(probe) => {
                if has(Check::Attraction) {
                    report.stages.push(guard("attraction", || attraction_stage(spec, &ss, &ctx, &probe, &rcfg)));
                }
                if has(Check::Semiconjugacy) {
                    report.stages.push(guard("semiconjugacy", || {
                        let r = semiconjugacy_residual(&ss, &probe, &ctx.cert, spec.t_max, 20, &rcfg)?;
                        let mut st = StageReport::new("semiconjugacy");
                        st.metric("max_residual", r.max_residual);
                        st.metric("t_max", spec.t_max);
                        st.verdict("residual", r.max_residual <= 1e-5);
                        Ok(st)
                    }));
                }
                if has(Check::Decomposition) {
                    report.stages.push(guard("decomposition", || {
                        let d = decompose_orbit(&ss, &probe, &ctx.cert, spec.t_max, &rcfg)?;
                        let mut st = StageReport::new("decomposition");
                        st.metric("bound_c", d.bound_c);
                        st.metric("bound_ratio", d.bound_ratio);
                        st.metric("reconstruction_error", d.reconstruction_error);
                        st.verdict("layer_bound", d.bound_ratio <= 1.0);
                        st.verdict("reconstruction", d.reconstruction_error <= 1e-12);
                        if let Some(dir) = spec.out_dir.as_ref() {
                            let path = dir.join("decomposition.csv");
                            let csv = io::orbits_csv(&[("orbit", &d.orbit), ("outer", &d.outer), ("layer", &d.layer)])?;
                            io::write_atomic(&path, csv.as_bytes())?;
                            st.metric("csv", artifact_name(&path));
                        }
                        Ok(st)
                    }));
                }
                if has(Check::DpConsistency) {
                    report.stages.push(guard("dp", || {
                        let dp = dp_point(&ss, &probe, &ctx.cert, &rcfg)?;
                        let fd = dp_finite_difference(&ss, &probe.xi, &probe.eta, &ctx.cert, &rcfg, 1e-4)?;
                        let err = max_abs_diff(dp.as_slice(), fd.as_slice());
                        let mut st = StageReport::new("dp");
                        st.metric("dp", dp.as_slice());
                        st.metric("fd_error", err);
                        st.verdict("fd", err <= 1e-4);
                        Ok(st)
                    }));
                }
            }
            Err(e) => report.stages.push(StageReport::error("probe", &e)),
        }
    }
    // collect CSV paths named by stages
    let extra: Vec<String> =
        report.stages.iter().filter_map(|s| s.metrics.get("csv").and_then(Value::as_str).map(str::to_string)).collect();
    report.artifacts.extend(extra);
    finish(spec, report)
}

fn artifact_name(path: &std::path::Path) -> String {
    path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}

fn finish(spec: &ScenarioSpec, mut report: ScenarioReport) -> ScenarioReport {
    if let Some(dir) = spec.out_dir.as_ref() {
        let path = dir.join("report.json");
        report.artifacts.push(artifact_name(&path));
        if let Err(e) = io::write_json(&path, &report) {
            report.artifacts.pop();
            report.stages.push(StageReport::error("write_report", &e));
        }
    }
    report
}

fn guard(name: &str, f: impl FnOnce() -> Result<StageReport>) -> StageReport {
    f().unwrap_or_else(|e| StageReport::error(name, &e))
}

fn oracle_error(field: &GridFunction, f: impl Fn(f64) -> Option<f64>) -> Option<f64> {
    let nodes = field.domain.nodes();
    let mut worst = 0.0f64;
    for (i, y) in nodes.iter().enumerate() {
        let v = f(y[0])?;
        for c in field.node_value(i) {
            worst = worst.max((c - v).abs());
        }
    }
    Some(worst)
}

fn oracle_tolerance(id: ExampleId) -> f64 {
    match id {
        ExampleId::Q1 => 1e-5,
        _ => 1e-6,
    }
}

fn spectral_stage(spec: &ScenarioSpec) -> StageReport {
    guard("spectral_gap", || {
        let s0 = build_system(spec.system, &spec.params, 0.0)?;
        let grid = spec.box_grid(s0.as_ref())?;
        let h0 = newton_branch(s0.as_ref(), &grid, &vec![0.0; s0.m()], 1e-12)?;
        let gap = spectral_gap_check(s0.as_ref(), &h0, 0.5)?;
        let mut st = StageReport::new("spectral_gap");
        st.metric("max_re", gap.max_re);
        st.metric("margin", gap.margin);
        st.metric("mu_req", 0.5);
        st.verdict("margin", gap.margin >= 0.5);
        Ok(st)
    })
}

fn lp_stage(spec: &ScenarioSpec, ctx: &Ctx, sol: &LpSolution, norm_bound: bool, oracle: bool) -> StageReport {
    let mut st = StageReport::new("lp_solve");
    let sup = sol.h.sup_norm(ctx.sys.fast_norm());
    st.metric("iterations", sol.report.iterates.len());
    st.metric("residuals", &sol.report.iterates);
    st.metric("measured_ratio", sol.report.measured_ratio);
    st.metric("theoretical_ratio", sol.report.theoretical_ratio);
    st.metric("horizon", ctx.cfg.horizon);
    st.metric("grid_points", ctx.cfg.computational_grid().num_nodes());
    st.metric("sup_h", sup);
    st.verdict("converged", sol.report.converged);
    st.verdict("ball", sup <= ctx.cert.ball_radius() * (1.0 + ctx.cert.margin));
    if norm_bound {
        st.metric("norm_bound", ctx.cert.norm_bound());
        st.verdict("norm_bound", sup <= 0.99 * ctx.cert.norm_bound());
    }
    if oracle && ctx.sys.m() == 1 && ctx.sys.n() == 1 {
        let eps = spec.working_eps();
        if let Some(err) = oracle_error(&sol.h, |y| analytic_h(spec.system, eps, y)) {
            st.metric("oracle_error", err);
            st.verdict("oracle", err <= oracle_tolerance(spec.system));
        }
    }
    st
}

fn contraction_stage(spec: &ScenarioSpec, ctx: &Ctx, rng: &mut ChaCha8Rng) -> Result<StageReport> {
    let grid = ctx.cfg.computational_grid();
    let m = ctx.sys.m();
    let theo = ctx.cert.lambda_ratio();
    let mut ratios = Vec::with_capacity(spec.contraction_pairs);
    for _ in 0..spec.contraction_pairs {
        let a = random_ball_function(&grid, m, ctx.cfg.ball_radius, rng);
        let b = random_ball_function(&grid, m, ctx.cfg.ball_radius, rng);
        ratios.push(lambda_ratio(ctx.sys.as_ref(), &a, &b, &ctx.cert, &ctx.cfg)?);
    }
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    // Lipschitz defect of the map truncated at -T.
    let defect = ctx.cert.k * (-ctx.cert.gap() * ctx.cfg.horizon).exp();
    let mut st = StageReport::new("contraction");
    st.metric("pairs", ratios.len());
    st.metric("max_ratio", worst);
    st.metric("theoretical_ratio", theo);
    st.metric("truncation_defect", defect);
    st.verdict("ratio", worst <= 1.05 * (theo + defect));
    Ok(st)
}

fn equivalence_stage(ctx: &Ctx, sol: &LpSolution) -> Result<StageReport> {
    let r = eqv_residual(ctx.sys.as_ref(), &sol.extended, &ctx.cert, &ctx.cfg)?;
    let mut bumped = sol.extended.clone();
    bumped.values.iter_mut().for_each(|v| *v += 0.1);
    let rb = eqv_residual(ctx.sys.as_ref(), &bumped, &ctx.cert, &ctx.cfg)?;
    let mut st = StageReport::new("equivalence");
    st.metric("residual", r);
    st.metric("perturbed_residual", rb);
    st.verdict("residual", r <= 1e-5);
    st.verdict("perturbed", rb > 0.05);
    Ok(st)
}

fn invariance_stage(spec: &ScenarioSpec, ctx: &Ctx, sol: &LpSolution) -> Result<StageReport> {
    let dom = ctx.sys.domain();
    let mut worst = 0.0f64;
    let mut partial = 0;
    for frac in [0.25, 0.5, 0.75] {
        let eta: Vec<f64> = dom.lower.iter().zip(&dom.upper).map(|(a, b)| a + frac * (b - a)).collect();
        let r = invariance_residual(ctx.sys.as_ref(), &sol.extended, &eta, spec.t_max, &IntegratorConfig::with_step(spec.dt))?;
        worst = worst.max(r.max_deviation);
        partial += r.partial as usize;
    }
    let floor = interpolation_error_estimate(&sol.extended);
    let mut st = StageReport::new("invariance");
    st.metric("max_deviation", worst);
    st.metric("partial_orbits", partial);
    st.metric("interpolation_floor", floor);
    st.verdict("residual", worst <= 1e-4 + floor);
    Ok(st)
}

/// `sup |h_eps - h_0|` on the box grid for every `eps` of the scenario.
pub fn continuity_gaps(spec: &ScenarioSpec) -> Result<Vec<(f64, f64)>> {
    let s0 = build_system(spec.system, &spec.params, 0.0)?;
    let grid = spec.box_grid(s0.as_ref())?;
    let h0 = newton_branch(s0.as_ref(), &grid, &vec![0.0; s0.m()], 1e-13)?;
    let mut out = Vec::new();
    for &eps in &spec.eps {
        let (sys, cert) = example_certificate(spec.system, &spec.params, eps, &spec.certify, spec.certificate.as_ref())?;
        let cfg = lp_config(spec, sys.as_ref(), &cert)?;
        let sol = lp_solve(sys.as_ref(), &cert, &cfg, LpInit::Zero)?;
        out.push((eps, sol.h.sup_dist(&h0, sys.fast_norm())));
    }
    Ok(out)
}

fn continuity_stage(spec: &ScenarioSpec) -> Result<StageReport> {
    let gaps = continuity_gaps(spec)?;
    let mut st = StageReport::new("continuity");
    st.metric("gaps", &gaps);
    let ratios: Vec<f64> = gaps.windows(2).map(|w| w[1].1 / w[0].1).collect();
    st.metric("ratios", &ratios);
    st.verdict("halving", !ratios.is_empty() && ratios.iter().all(|r| (0.35..=0.65).contains(r)));
    Ok(st)
}

fn d2h_stage(
    spec: &ScenarioSpec,
    ctx: &Ctx,
    sol: &LpSolution,
    dh_ext: &GridFunction,
    dh_box: &GridFunction,
    fd_check: bool,
    oracle: bool,
) -> Result<StageReport> {
    let d2 = d2h_solve(ctx.sys.as_ref(), &sol.extended, dh_ext, &ctx.cert, &ctx.cfg)?;
    let mut st = StageReport::new("d2h_solve");
    st.metric("iterations", d2.report.iterates.len());
    if fd_check {
        let fd = central_differences(dh_box);
        let err = max_abs_diff(&d2.field.values, &fd.values);
        st.metric("fd_error", err);
        st.verdict("fd", err <= 1e-3);
    }
    if oracle && ctx.sys.m() == 1 && ctx.sys.n() == 1 {
        if let Some(err) = oracle_error(&d2.field, |y| analytic_d2h(spec.system, spec.working_eps(), y)) {
            st.metric("oracle_error", err);
            st.verdict("oracle", err <= 1e-3);
        }
    }
    Ok(st)
}

fn straighten_stage(ss: &StraightenedSystem, ctx: &Ctx) -> StageReport {
    let mut st = StageReport::new("straighten");
    let m = ss.m();
    let zero = vec![0.0; m];
    let mut out = vec![0.0; m];
    let mut worst = 0.0f64;
    for y in ctx.cfg.grid.nodes() {
        ss.f(&zero, &y, &mut out);
        worst = worst.max(ss.fast_norm().norm(&out));
    }
    st.metric("ft_on_manifold", worst);
    st.metric("dh_sup", ss.dh_sup());
    st.metric("n1_straightened", ss.n1(&ctx.cert));
    st.metric("e_bound", ss.e_bound(&ctx.cert));
    st.verdict("ft_on_manifold", worst <= 1e-4);
    st
}

/// Seeded queries: `xi` in the fast ball of half the sampling radius, `eta` in the box.
pub fn random_queries(sys: &dyn FastSlowSystem, count: usize, x_radius: f64, rng: &mut ChaCha8Rng) -> Vec<Query> {
    let dom = sys.domain();
    (0..count)
        .map(|_| {
            let xi: Vec<f64> = (0..sys.m()).map(|_| rng.gen_range(-0.5..0.5) * x_radius).collect();
            let eta: Vec<f64> = (0..sys.n()).map(|k| rng.gen_range(dom.lower[k]..=dom.upper[k])).collect();
            Query { xi, eta }
        })
        .collect()
}

fn reduction_stage(
    spec: &ScenarioSpec,
    ss: &StraightenedSystem,
    ctx: &Ctx,
    rcfg: &ReductionConfig,
    rng: &mut ChaCha8Rng,
    enorm: bool,
    oracle: bool,
) -> Result<StageReport> {
    let mut st = StageReport::new("reduction");
    st.verdict("reduction_budget", ctx.cert.reduction_ok());
    let (mut done, mut skipped) = (0usize, 0usize);
    let (mut worst_e, mut worst_p, mut zero_q) = (0.0f64, 0.0f64, true);
    let mut e_bound = ss.e_bound(&ctx.cert);
    let mut eval = |q: &Query, done: &mut usize, skipped: &mut usize| -> Result<()> {
        match q_along_orbit(ss, &q.xi, &q.eta, &ctx.cert, rcfg) {
            Ok(r) => {
                *done += 1;
                worst_e = worst_e.max(r.e_ratio);
                e_bound = r.e_bound;
                if let Some(p) = (q.xi.len() == 1 && q.eta.len() == 1)
                    .then(|| analytic_p(spec.system, spec.working_eps(), q.xi[0], q.eta[0]))
                    .flatten()
                {
                    worst_p = worst_p.max((r.p[0] - p).abs());
                }
            }
            Err(SlowFastError::DomainExit { .. }) | Err(SlowFastError::Domain { .. }) => *skipped += 1,
            Err(e) => return Err(e),
        }
        if let Ok(z) = q_along_orbit(ss, &vec![0.0; ss.m()], &q.eta, &ctx.cert, rcfg) {
            zero_q &= z.q.iter().all(|v| *v == 0.0);
        }
        Ok(())
    };
    for q in &spec.queries {
        eval(q, &mut done, &mut skipped)?;
    }
    // Random queries whose orbit leaves the grid of h are redrawn, up to 10 draws per query.
    let target = done + spec.random_queries;
    let mut draws = 0;
    while done < target && draws < 10 * spec.random_queries {
        draws += 1;
        let q = random_queries(ss.base.as_ref(), 1, spec.certify.sampling.x_radius, rng).remove(0);
        eval(&q, &mut done, &mut skipped)?;
    }
    st.metric("queries", done);
    st.metric("skipped", skipped);
    st.verdict("query_count", done >= target);
    st.metric("max_e_ratio", worst_e);
    st.metric("e_bound", e_bound);
    st.verdict("zero_xi", zero_q);
    if enorm {
        st.verdict("e_norm", done > 0 && worst_e <= 1.05 * e_bound);
    }
    if oracle && analytic_p(spec.system, 0.1, 0.0, 0.0).is_some() && ss.m() == 1 {
        st.metric("oracle_p_error", worst_p);
        st.verdict("oracle_p", worst_p <= 1e-6);
    }
    Ok(st)
}

/// The probe query: the scenario's, or `xi = x_radius / 2` at the first of a few slow points whose
/// orbit stays on the grid of `h` for `t_max` plus the reduction horizon.
fn choose_probe(spec: &ScenarioSpec, ss: &StraightenedSystem, ctx: &Ctx, rcfg: &ReductionConfig) -> Result<ReductionResult> {
    if let Some(p) = &spec.probe {
        return q_along_orbit(ss, &p.xi, &p.eta, &ctx.cert, rcfg);
    }
    let dom = ss.base.domain();
    let xi = vec![0.5 * spec.certify.sampling.x_radius; ss.m()];
    let mut last = SlowFastError::Argument("no probe candidates".into());
    for frac in [0.0, 0.1, 0.5, 0.9, 0.3, 0.7] {
        let eta: Vec<f64> = dom.lower.iter().zip(&dom.upper).map(|(a, b)| a + frac * (b - a)).collect();
        let r = match q_along_orbit(ss, &xi, &eta, &ctx.cert, rcfg) {
            Ok(r) => r,
            Err(e) => {
                last = e;
                continue;
            }
        };
        // The semiconjugacy check re-queries along the orbit up to t_max.
        let far = crate::integrate::flow(ss.base.as_ref(), &vec_add(&xi, &ss.h.at(&eta)?), &eta, (0.0, spec.t_max + r.horizon), &rcfg.integrator);
        match far {
            Ok(o) if (0..o.len()).all(|i| ss.h.domain.bounds().contains(o.slow_at(i))) => return Ok(r),
            Ok(_) => last = SlowFastError::DomainExit { time: spec.t_max },
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn vec_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn attraction_stage(
    spec: &ScenarioSpec,
    ss: &StraightenedSystem,
    ctx: &Ctx,
    probe: &ReductionResult,
    rcfg: &ReductionConfig,
) -> Result<StageReport> {
    let fit = attraction_rate_fit(ss, probe, &ctx.cert, spec.t_max, rcfg)?;
    let target = 0.95 * ctx.cert.gap();
    let mut st = StageReport::new("attraction");
    st.metric("rate", fit.fit.rate);
    st.metric("r2", fit.fit.r2);
    st.metric("samples", fit.fit.used);
    st.metric("noise_floor", fit.noise_floor);
    st.metric("required_rate", target);
    st.verdict("rate", fit.fit.rate >= target);
    st.verdict("r2", fit.fit.r2 >= 0.99);
    if let Some(sf) = fit.slow_fit {
        st.metric("slow_prefactor", sf.prefactor);
        st.metric("slow_prefactor_bound", fit.slow_prefactor_bound);
        st.verdict("slow_prefactor", sf.prefactor <= 1.05 * fit.slow_prefactor_bound);
    }
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_rejects_unknown_fields() {
        assert!(ScenarioSpec::from_json(r#"{"system": "L1", "bogus": 1}"#).is_err());
        let s = ScenarioSpec::from_json(r#"{"system": "Q1", "grid": 51}"#).unwrap();
        assert_eq!(s.grid, 51);
        assert_eq!(s.derivative, 2);
    }

    #[test]
    fn ball_functions_lie_in_ball() {
        let g = GridDomain::interval(-1.0, 1.0, 201).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let f = random_ball_function(&g, 2, 0.7, &mut rng);
            let n = crate::model::Norm::Euclidean;
            assert!(f.sup_norm(&n) + f.lipschitz_estimate(&n) <= 0.7);
        }
    }
}
