//! Acceptance criteria 1 to 11: one PASS/FAIL line each, then a single assertion.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use serde_json::Value;
use slowfast::certify::frozen_coefficient_window;
use slowfast::harness::examples::{
    analytic_h, constant_process, jordan_generator, rotated_jordan, rotated_jordan_process, rotation_generator,
};
use slowfast::harness::scenario::example_certificate;
use slowfast::harness::{run_scenario, ExampleId, ExampleParams, ScenarioReport, ScenarioSpec};
use slowfast::slow_manifold::{lp_solve, LpConfig, LpInit};
use slowfast::{op_norm, GridDomain, GridFunction, IntegratorConfig, Norm, ProcessHandle};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new() -> Self {
        Self { pass: true, detail: String::new() }
    }

    fn check(&mut self, ok: bool, what: impl AsRef<str>) {
        self.pass &= ok;
        if !self.detail.is_empty() {
            self.detail.push_str("; ");
        }
        self.detail.push_str(what.as_ref());
        if !ok {
            self.detail.push_str(" [x]");
        }
    }
}

fn metric(r: &ScenarioReport, stage: &str, key: &str) -> Option<Value> {
    r.stage(stage).and_then(|s| s.metrics.get(key).cloned())
}

fn num(r: &ScenarioReport, stage: &str, key: &str) -> f64 {
    metric(r, stage, key).and_then(|v| v.as_f64()).unwrap_or(f64::NAN)
}

fn flag(r: &ScenarioReport, stage: &str, key: &str) -> bool {
    metric(r, stage, key).and_then(|v| v.as_bool()).unwrap_or(false)
}

fn gap(r: &ScenarioReport) -> f64 {
    r.certificate.as_ref().map(|c| c.gap()).unwrap_or(f64::NAN)
}

fn scenario(id: ExampleId) -> ScenarioReport {
    let mut spec = ScenarioSpec::for_example(id);
    spec.name = format!("acceptance-{id}");
    spec.random_queries = 100;
    let t0 = Instant::now();
    let r = run_scenario(&spec);
    eprintln!("scenario {id}: {:.1} s", t0.elapsed().as_secs_f64());
    r
}

fn sup_oracle(h: &GridFunction, f: impl Fn(f64) -> f64) -> f64 {
    (0..h.domain.num_nodes()).map(|i| (h.node_value(i)[0] - f(h.domain.node(i)[0])).abs()).fold(0.0, f64::max)
}

/// Criterion 1 timed from a cold start: certify then iterate.
fn exact_fixed_point(id: ExampleId, tol: f64, v: &mut Verdict) {
    let t0 = Instant::now();
    let params = ExampleParams::for_example(id);
    let spec = ScenarioSpec::for_example(id);
    let (sys, cert) = example_certificate(id, &params, 0.1, &spec.certify, None).unwrap();
    let grid = GridDomain::new(params.lower.clone(), params.upper.clone(), vec![101]).unwrap();
    let cfg = LpConfig::new(&cert, grid, IntegratorConfig::with_step(0.01), spec.tol_fixed_point)
        .unwrap()
        .with_halo(sys.as_ref(), 200, spec.seed);
    let sol = lp_solve(sys.as_ref(), &cert, &cfg, LpInit::Zero).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let err = sup_oracle(&sol.h, |y| analytic_h(id, 0.1, y).unwrap());
    v.check(err <= tol, format!("{id} sup err {err:.2e} <= {tol:.0e}"));
    v.check(secs <= 30.0, format!("{id} {secs:.1} s <= 30 s"));
}

fn two_norm(a: &DMatrix<f64>) -> f64 {
    op_norm(a, &Norm::Euclidean, &Norm::Euclidean)
}

/// `sup_t e^{mu t} |T(t, 0)|` on a dense grid of `[0, t_max]`.
fn sampled_k(p: &ProcessHandle, mu: f64, t_max: f64) -> f64 {
    p.matrices_from(0.0, t_max)
        .unwrap()
        .iter()
        .map(|(t, m)| (mu * t).exp() * two_norm(m))
        .fold(0.0, f64::max)
}

fn window_lemma(v: &mut Verdict) {
    let (c, mu, eps) = (1.5, 0.5, 0.2);
    let frozen = constant_process(rotated_jordan(c, 0.7), 0.01);
    let k = sampled_k(&frozen, mu, 40.0);
    let l = frozen_coefficient_window(k, mu, eps).unwrap();
    // |dA/dpsi| <= 2c, so drift over a window l stays below eps / K.
    let omega = eps / (k * 2.0 * c * l);
    let slow = rotated_jordan_process(c, omega, 0.01);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let s = 0.05 * i as f64;
        let tau = 0.02 * ((i * 389) % 1000) as f64;
        let t = s + tau;
        let bound = k * (-(mu - eps) * tau).exp();
        worst = worst.max(two_norm(&slow.matrix(t, s).unwrap()) / bound);
    }
    v.check(worst <= 1.02, format!("K={k:.4} l={l:.3} omega={omega:.3e}: max |T|/bound {worst:.4} <= 1.02 on 1000 pairs"));

    let growth = |gen: fn(f64) -> DMatrix<f64>, nus: &[f64], rate: f64| -> Vec<f64> {
        nus.iter().map(|&nu| sampled_k(&constant_process(gen(nu), 1e-3), rate, 30.0)).collect()
    };
    let show = |ks: &[f64]| ks.iter().map(|k| format!("{k:.3}")).collect::<Vec<_>>().join(", ");
    let increasing = |ks: &[f64]| ks.windows(2).all(|w| w[1] > w[0]);
    let jordan = growth(jordan_generator, &[1.0, 2.0, 5.0, 10.0], 0.5);
    v.check(increasing(&jordan), format!("Jordan K(nu) at mu=0.5, nu=1..10: [{}]", show(&jordan)));
    let jordan0 = growth(jordan_generator, &[1.0, 2.0, 5.0, 10.0], 0.0);
    v.check(jordan0[2] > jordan0[0], format!("Jordan max|e^At|: K(5)={:.3} > K(1)={:.3}", jordan0[2], jordan0[0]));
    let rotation = growth(rotation_generator, &[1.0, 2.0, 5.0, 10.0], 0.5);
    v.check(increasing(&rotation), format!("rotation K(nu) at mu=0.5, nu=1..10: [{}]", show(&rotation)));

    let rot = constant_process(rotation_generator(7.0), 1e-3);
    let x = rot.apply(PI / 2.0, 0.0, &[1.0, 0.0]).unwrap();
    let got = Norm::Euclidean.norm(&x);
    let want = 7.0 * (-PI / 2.0).exp();
    let rel = (got - want).abs() / want;
    v.check(rel <= 0.01, format!("rotation nu=7 |x(pi/2)|={got:.6} vs {want:.6} (rel {rel:.1e})"));
}

/// Observed order of NF1 under `m` 64 -> 127 -> 253 and slow grid 3 -> 5 -> 9, all at the
/// m = 64 certificate so the horizon is shared.
fn nf1_refinement() -> (f64, f64, f64) {
    let id = ExampleId::NF1;
    let spec = ScenarioSpec::for_example(id);
    let eps = 0.05;
    let (_, cert) = example_certificate(id, &spec.params, eps, &spec.certify, None).unwrap();
    let mut sols = Vec::new();
    for (m, pts) in [(64usize, 3usize), (127, 5), (253, 9)] {
        let mut p = spec.params.clone();
        p.m = m;
        let sys = slowfast::harness::build_system(id, &p, eps).unwrap();
        let grid = GridDomain::new(p.lower.clone(), p.upper.clone(), vec![pts]).unwrap();
        let cfg = LpConfig::new(&cert, grid, IntegratorConfig::with_step(spec.dt), 1e-10)
            .unwrap()
            .with_halo(sys.as_ref(), 200, spec.seed);
        sols.push(lp_solve(sys.as_ref(), &cert, &cfg, LpInit::Zero).unwrap().h);
    }
    let diff = |a: &GridFunction, b: &GridFunction| {
        let mut worst = 0.0f64;
        for j in 0..3 {
            for i in 0..64 {
                let va = a.node_value(j * (a.domain.num_nodes() - 1) / 2)[i * (a.dim - 1) / 63];
                let vb = b.node_value(j * (b.domain.num_nodes() - 1) / 2)[i * (b.dim - 1) / 63];
                worst = worst.max((va - vb).abs());
            }
        }
        worst
    };
    let e1 = diff(&sols[0], &sols[1]);
    let e2 = diff(&sols[1], &sols[2]);
    ((e1 / e2).log2(), e1, e2)
}

#[test]
fn acceptance_criteria() {
    let ids = [ExampleId::L1, ExampleId::Q1, ExampleId::L2, ExampleId::VdpCut, ExampleId::NF1];
    let reports: Vec<(ExampleId, ScenarioReport)> = ids.iter().map(|&id| (id, scenario(id))).collect();
    let rep = |id: ExampleId| &reports.iter().find(|(i, _)| *i == id).unwrap().1;
    let mut lines: Vec<(u8, Verdict)> = Vec::new();

    let mut v = Verdict::new();
    exact_fixed_point(ExampleId::L1, 1e-6, &mut v);
    exact_fixed_point(ExampleId::Q1, 1e-5, &mut v);
    lines.push((1, v));

    let mut v = Verdict::new();
    for id in [ExampleId::L1, ExampleId::Q1, ExampleId::L2, ExampleId::VdpCut] {
        let r = rep(id);
        v.check(
            flag(r, "contraction", "ratio_ok"),
            format!(
                "{id} max {:.3e} vs theo {:.3e} (+defect {:.1e}) over {} pairs",
                num(r, "contraction", "max_ratio"),
                num(r, "contraction", "theoretical_ratio"),
                num(r, "contraction", "truncation_defect"),
                num(r, "contraction", "pairs")
            ),
        );
    }
    lines.push((2, v));

    let mut v = Verdict::new();
    for id in [ExampleId::L1, ExampleId::Q1, ExampleId::NF1] {
        let r = rep(id);
        let (sup, bound) = (num(r, "lp_solve", "sup_h"), num(r, "lp_solve", "norm_bound"));
        v.check(sup <= 0.99 * bound, format!("{id} |h| {sup:.4} <= 0.99 * {bound:.4}"));
    }
    lines.push((3, v));

    let mut v = Verdict::new();
    for id in [ExampleId::L1, ExampleId::Q1] {
        let ratios: Vec<f64> = metric(rep(id), "continuity", "ratios")
            .and_then(|r| serde_json::from_value(r).ok())
            .unwrap_or_default();
        let ok = ratios.len() == 2 && ratios.iter().all(|q| (0.35..=0.65).contains(q));
        v.check(ok, format!("{id} gap ratios {ratios:.4?}"));
    }
    lines.push((4, v));

    let mut v = Verdict::new();
    for id in ids {
        let e = num(rep(id), "dh_solve", "fd_error");
        v.check(e <= 1e-4, format!("{id} dh fd {e:.1e}"));
    }
    let d2 = num(rep(ExampleId::Q1), "d2h_solve", "oracle_error");
    v.check(d2 <= 1e-3, format!("Q1 |d2h - 2| {d2:.1e}"));
    lines.push((5, v));

    let mut v = Verdict::new();
    for id in [ExampleId::Q1, ExampleId::L2] {
        let r = rep(id);
        let (rate, r2) = (num(r, "attraction", "rate"), num(r, "attraction", "r2"));
        let need = 0.95 * gap(r);
        v.check(rate >= need && r2 >= 0.99, format!("{id} rate {rate:.4} >= {need:.4}, r2 {r2:.5}"));
    }
    lines.push((6, v));

    let mut v = Verdict::new();
    for id in [ExampleId::L2, ExampleId::Q1] {
        let e = num(rep(id), "semiconjugacy", "max_residual");
        v.check(e <= 1e-5, format!("{id} max residual {e:.1e} on [0, 10]"));
    }
    lines.push((7, v));

    let mut v = Verdict::new();
    for id in ids {
        let r = rep(id);
        let (q, b, n) = (num(r, "reduction", "max_e_ratio"), num(r, "reduction", "e_bound"), num(r, "reduction", "queries"));
        v.check(q <= 1.05 * b && n >= 100.0, format!("{id} {q:.4} <= 1.05 * {b:.4} over {n} queries"));
    }
    lines.push((8, v));

    let mut v = Verdict::new();
    window_lemma(&mut v);
    lines.push((9, v));

    let mut v = Verdict::new();
    let nf = rep(ExampleId::NF1);
    let margin = num(nf, "spectral_gap", "margin");
    v.check(margin >= 0.5, format!("margin {margin:.5}"));
    v.check(flag(nf, "lp_solve", "converged_ok"), "lp_solve converged");
    let inv = num(nf, "invariance", "max_deviation");
    v.check(inv <= 1e-4, format!("invariance {inv:.1e}"));
    let t0 = Instant::now();
    let (order, e1, e2) = nf1_refinement();
    v.check(order >= 1.8, format!("order {order:.3} ({e1:.2e} -> {e2:.2e}, {:.0} s)", t0.elapsed().as_secs_f64()));
    lines.push((10, v));

    let mut v = Verdict::new();
    for id in ids {
        let r = rep(id);
        let (e, p) = (num(r, "equivalence", "residual"), num(r, "equivalence", "perturbed_residual"));
        v.check(e <= 1e-5 && p > 0.05, format!("{id} {e:.1e} / perturbed {p:.3}"));
    }
    lines.push((11, v));

    for (id, r) in &reports {
        eprintln!("report {id}: exit {}", r.exit_code());
    }
    // Written to the raw handle so the lines survive output capture.
    let mut out = std::io::stdout().lock();
    for (n, v) in &lines {
        writeln!(out, "criterion {n:>2}: {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail).unwrap();
    }
    drop(out);
    let failed: Vec<u8> = lines.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
