//! `slowfast` command line: certificates, slow manifolds, reduction queries and scenario runs.
//!
//! Exit codes: 0 success, 1 usage or schema error, 2 infeasible certificate,
//! 3 non-convergence, 4 numeric or check failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use slowfast::certify::{certify_system, spectral_gap_check, ConstantsCertificate, Status};
use slowfast::harness::examples::{build_system, ExampleId};
use slowfast::harness::scenario::{example_certificate, run_scenario, ScenarioSpec, StageStatus};
use slowfast::integrate::IntegratorConfig;
use slowfast::io;
use slowfast::reduction::{decompose_orbit, q_along_orbit, straighten, ReductionConfig};
use slowfast::slow_manifold::{d2h_solve, dh_solve, lp_solve, newton_branch, LpConfig, LpInit};
use slowfast::{GridDomain, GridFunction, SlowFastError};

#[derive(Parser, Debug)]
#[command(name = "slowfast", version, about = "Slow manifolds and reduction maps of fast-slow systems")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the constants certificate and print the hypothesis table.
    Certify(Common),
    /// Compute the slow manifold `h` (and derivatives) on a grid.
    SlowManifold {
        #[command(flatten)]
        common: Common,
        /// Highest derivative of `h` to compute.
        #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=2))]
        derivative: u8,
    },
    /// Evaluate the reduction map at `(xi, eta)` and decompose the orbit.
    Reduce {
        #[command(flatten)]
        common: Common,
        /// Fast offset from the manifold (comma separated).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        xi: Vec<f64>,
        /// Slow base point (comma separated).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        eta: Vec<f64>,
        /// Length of the decomposed orbit.
        #[arg(long, default_value_t = 10.0)]
        t_max: f64,
    },
    /// Run a scenario file (or the example's default scenario) and emit its report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Scenario JSON; flags given explicitly override its fields.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Example system: L1, Q1, L2, VDP-cut, NF1.
    #[arg(long, default_value = "L1")]
    system: String,
    /// Timescale ratio.
    #[arg(long)]
    eps: Option<f64>,
    /// Grid points per slow axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Integrator step.
    #[arg(long)]
    dt: Option<f64>,
    /// Truncation horizon of the fixed point.
    #[arg(long)]
    horizon: Option<f64>,
    /// Seed of every random sample.
    #[arg(long)]
    seed: Option<u64>,
    /// NF1 quadrature nodes.
    #[arg(long)]
    m: Option<usize>,
    /// Certificate field override `NAME=VALUE` (repeatable).
    #[arg(long = "override", value_name = "NAME=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> SlowFastError {
    SlowFastError::Argument(msg.into())
}

impl Common {
    fn id(&self) -> Result<ExampleId, SlowFastError> {
        self.system.parse()
    }

    fn overrides(&self) -> Result<BTreeMap<String, f64>, SlowFastError> {
        self.overrides
            .iter()
            .map(|s| {
                let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("override '{s}' is not NAME=VALUE")))?;
                let v: f64 = v.trim().parse().map_err(|_| usage(format!("override '{s}' has no numeric value")))?;
                Ok((k.trim().to_string(), v))
            })
            .collect()
    }

    /// Scenario with the flags applied on top of `base`.
    fn apply(&self, mut spec: ScenarioSpec, explicit_system: bool) -> Result<ScenarioSpec, SlowFastError> {
        if explicit_system {
            let id = self.id()?;
            if id != spec.system {
                spec = ScenarioSpec::for_example(id);
            }
        }
        if let Some(e) = self.eps {
            spec.eps = vec![e];
        }
        if let Some(g) = self.grid {
            spec.grid = g;
        }
        if let Some(dt) = self.dt {
            spec.dt = dt;
        }
        if self.horizon.is_some() {
            spec.horizon = self.horizon;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
            spec.certify.sampling.seed = s;
        }
        if let Some(m) = self.m {
            spec.params.m = m;
        }
        spec.certify.overrides.extend(self.overrides()?);
        if self.out.is_some() {
            spec.out_dir = self.out.clone();
        }
        Ok(spec)
    }

    fn spec(&self) -> Result<ScenarioSpec, SlowFastError> {
        self.apply(ScenarioSpec::for_example(self.id()?), true)
    }
}

fn print_table(cert: &ConstantsCertificate) {
    println!("{:<6} {:<8} condition", "name", "status");
    for row in cert.hypothesis_table() {
        let status = match row.status {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Unknown => "unknown",
        };
        println!("{:<6} {:<8} {}", row.name, status, row.condition);
    }
    println!(
        "K={} mu={} M0={} M1x={} M1y={} N0={} N1={} delta={} rho={}",
        cert.k, cert.mu, cert.m0, cert.m1x, cert.m1y, cert.n0, cert.n1, cert.delta, cert.rho
    );
    println!(
        "existence_ok={} smooth_ok={} reduction_ok={} second_order_ok={}",
        cert.existence_ok(),
        cert.smooth_ok(),
        cert.reduction_ok(),
        cert.second_order_ok()
    );
}

fn out_path(dir: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    dir.as_ref().map(|d| d.join(name))
}

fn cmd_certify(c: &Common) -> anyhow::Result<i32> {
    let spec = c.spec()?;
    let eps = spec.eps[0];
    let sys = build_system(spec.system, &spec.params, eps)?;
    let cert = certify_system(sys.clone(), &spec.certify)?.certificate;
    print_table(&cert);
    let mut gap = None;
    if matches!(spec.system, ExampleId::NF1 | ExampleId::VdpCut) {
        let s0 = build_system(spec.system, &spec.params, 0.0)?;
        let d = s0.domain();
        let grid = GridDomain::new(d.lower.clone(), d.upper.clone(), vec![spec.grid; d.dim()])?;
        let h0 = newton_branch(s0.as_ref(), &grid, &vec![0.0; s0.m()], 1e-12)?;
        let g = spectral_gap_check(s0.as_ref(), &h0, 0.5)?;
        println!("spectral_gap max_re={} margin={} pass={}", g.max_re, g.margin, g.pass);
        gap = Some(g);
    }
    if let Some(p) = out_path(&c.out, "certificate.json") {
        let doc = json!({
            "system": spec.system.to_string(),
            "eps": eps,
            "certificate": cert,
            "hypotheses": cert.hypothesis_table(),
            "existence_ok": cert.existence_ok(),
            "smooth_ok": cert.smooth_ok(),
            "reduction_ok": cert.reduction_ok(),
            "spectral_gap": gap,
        });
        io::write_json(&p, &doc)?;
    }
    let required = cert.hypothesis_table().iter().take(4).all(|r| r.status == Status::Pass);
    Ok(if required { 0 } else { 2 })
}

fn lp_setup(spec: &ScenarioSpec) -> anyhow::Result<(slowfast::SystemRef, ConstantsCertificate, LpConfig)> {
    let eps = spec.eps[0];
    let (sys, cert) = example_certificate(spec.system, &spec.params, eps, &spec.certify, spec.certificate.as_ref())?;
    let d = sys.domain();
    let grid = GridDomain::new(d.lower.clone(), d.upper.clone(), vec![spec.grid; d.dim()])?;
    let mut cfg = LpConfig::new(&cert, grid, IntegratorConfig::with_step(spec.dt), spec.tol_fixed_point)?;
    if let Some(t) = spec.horizon {
        cfg.horizon = t;
    }
    let cfg = cfg.with_halo(sys.as_ref(), 200, spec.seed);
    Ok((sys, cert, cfg))
}

fn write_fields(dir: &Path, fields: &[(&str, &GridFunction)], manifest: serde_json::Value) -> anyhow::Result<()> {
    let csv = io::fields_csv(fields)?;
    io::write_atomic(&dir.join("h.csv"), csv.as_bytes())?;
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

fn cmd_slow_manifold(c: &Common, derivative: u8) -> anyhow::Result<i32> {
    let spec = c.spec()?;
    let eps = spec.eps[0];
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("slowfast-out"));
    if eps == 0.0 {
        let sys = build_system(spec.system, &spec.params, 0.0)?;
        let d = sys.domain();
        let grid = GridDomain::new(d.lower.clone(), d.upper.clone(), vec![spec.grid; d.dim()])?;
        let h = newton_branch(sys.as_ref(), &grid, &vec![0.0; sys.m()], 1e-13)?;
        let manifest = json!({"system": spec.system.to_string(), "eps": 0.0, "grid": grid, "method": "newton"});
        write_fields(&out, &[("h", &h)], manifest)?;
        println!("newton branch on {} nodes written to {}", grid.num_nodes(), out.display());
        return Ok(0);
    }
    let (sys, cert, cfg) = lp_setup(&spec)?;
    let sol = lp_solve(sys.as_ref(), &cert, &cfg, LpInit::Zero)?;
    println!(
        "lp_solve converged in {} sweeps, measured ratio {:e}, theoretical {:e}",
        sol.report.iterates.len(),
        sol.report.measured_ratio,
        sol.report.theoretical_ratio
    );
    let mut reports = vec![json!({"name": "h", "report": sol.report})];
    let mut fields: Vec<(&str, GridFunction)> = vec![("h", sol.h.clone())];
    if derivative >= 1 {
        let dh = dh_solve(sys.as_ref(), &sol.extended, &cert, &cfg)?;
        reports.push(json!({"name": "dh", "report": dh.report}));
        if derivative >= 2 {
            let d2 = d2h_solve(sys.as_ref(), &sol.extended, &dh.extended, &cert, &cfg)?;
            reports.push(json!({"name": "d2h", "report": d2.report}));
            fields.push(("dh", dh.field));
            fields.push(("d2h", d2.field));
        } else {
            fields.push(("dh", dh.field));
        }
    }
    let refs: Vec<(&str, &GridFunction)> = fields.iter().map(|(n, f)| (*n, f)).collect();
    let manifest = json!({
        "system": spec.system.to_string(),
        "eps": eps,
        "grid": cfg.grid,
        "horizon": cfg.horizon,
        "certificate": cert,
        "reports": reports,
    });
    write_fields(&out, &refs, manifest)?;
    println!("fields written to {}", out.display());
    Ok(0)
}

fn cmd_reduce(c: &Common, xi: &[f64], eta: &[f64], t_max: f64) -> anyhow::Result<i32> {
    let spec = c.spec()?;
    let (sys, cert, cfg) = lp_setup(&spec)?;
    if xi.len() != sys.m() || eta.len() != sys.n() {
        return Err(usage(format!("need {} xi and {} eta components", sys.m(), sys.n())).into());
    }
    let sol = lp_solve(sys.as_ref(), &cert, &cfg, LpInit::Zero)?;
    let dh = dh_solve(sys.as_ref(), &sol.extended, &cert, &cfg)?;
    let ss = straighten(sys.clone(), &sol, &dh)?;
    let rcfg = ReductionConfig { integrator: IntegratorConfig::with_step(spec.dt), tol_q: spec.tol_q, max_iters: 200 };
    let r = q_along_orbit(&ss, xi, eta, &cert, &rcfg)?;
    println!("P = {:?}", r.p);
    println!("Q = {:?}", r.q);
    println!("E_ratio = {} (bound {})", r.e_ratio, r.e_bound);
    if let Some(dir) = &c.out {
        let doc = json!({
            "system": spec.system.to_string(),
            "eps": spec.eps[0],
            "xi": r.xi, "eta": r.eta, "P": r.p, "Q": r.q,
            "E_ratio": r.e_ratio, "E_bound": r.e_bound,
            "horizon": r.horizon, "report": r.report,
        });
        io::write_json(&dir.join("reduction.json"), &doc)?;
        match decompose_orbit(&ss, &r, &cert, t_max, &rcfg) {
            Ok(d) => {
                let csv = io::orbits_csv(&[("orbit", &d.orbit), ("outer", &d.outer), ("layer", &d.layer)])?;
                io::write_atomic(&dir.join("decomposition.csv"), csv.as_bytes())?;
            }
            Err(e) => log::warn!("orbit decomposition skipped: {e}"),
        }
    }
    Ok(0)
}

fn cmd_run(c: &Common, scenario: Option<&Path>) -> anyhow::Result<i32> {
    let spec = match scenario {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            let explicit = std::env::args().any(|a| a == "--system" || a.starts_with("--system="));
            c.apply(ScenarioSpec::from_json(&text)?, explicit)?
        }
        None => c.spec()?,
    };
    let report = run_scenario(&spec);
    for s in &report.stages {
        let status = match s.status {
            StageStatus::Pass => "pass",
            StageStatus::Fail => "FAIL",
            StageStatus::Error => "ERROR",
            StageStatus::Skipped => "skipped",
        };
        println!("{:<16} {}", s.name, status);
    }
    if spec.out_dir.is_none() {
        println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
    }
    Ok(report.exit_code())
}

fn exit_code_of(e: &anyhow::Error) -> i32 {
    e.downcast_ref::<SlowFastError>().map(SlowFastError::exit_code).unwrap_or(4)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SLOWFAST_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Certify(c) => cmd_certify(c),
        Command::SlowManifold { common, derivative } => cmd_slow_manifold(common, *derivative),
        Command::Reduce { common, xi, eta, t_max } => cmd_reduce(common, xi, eta, *t_max),
        Command::Run { common, scenario } => cmd_run(common, scenario.as_deref()),
    };
    let code = match result {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_of(&e)
        }
    };
    ExitCode::from(code as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use slowfast::certify::CertifyOptions;
    use slowfast::harness::examples::{default_x_radius, ExampleParams};

    #[test]
    fn overrides_parse() {
        let c = Common {
            system: "L1".into(),
            eps: None,
            grid: None,
            dt: None,
            horizon: None,
            seed: None,
            m: None,
            overrides: vec!["N1=10".into(), "K = 2".into()],
            out: None,
        };
        let o = c.overrides().unwrap();
        assert_eq!(o["N1"], 10.0);
        assert_eq!(o["K"], 2.0);
        let bad = Common { overrides: vec!["N1".into()], ..c };
        assert!(bad.overrides().is_err());
    }

    #[test]
    fn default_radius_used() {
        let spec = Common {
            system: "NF1".into(),
            eps: Some(0.05),
            grid: None,
            dt: None,
            horizon: None,
            seed: Some(3),
            m: Some(16),
            overrides: vec![],
            out: None,
        }
        .spec()
        .unwrap();
        assert_eq!(spec.params.m, 16);
        assert_eq!(spec.certify.sampling.x_radius, default_x_radius(ExampleId::NF1, &ExampleParams::for_example(ExampleId::NF1)));
        let _ = CertifyOptions::default();
    }
}
