//! Straightening transform, the reduction map `P` by an orbit-local fixed point, its
//! derivative, and the decomposition of orbits into slow-manifold and layer parts.
//!
//! Orbits are integrated in the original coordinates; `xt = x - h(y)` is formed on samples.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::certify::ConstantsCertificate;
use crate::error::{Result, SlowFastError};
use crate::harness::fit::{fit_exponential, ExpFit};
use crate::integrate::{
    cumulative_from_end, flow_with_policy, integrate_track, rk4_step, variational_flow, DomainPolicy,
    IntegratorConfig, Rk4Work, UniformTrack,
};
use crate::model::{fd_jacobians, BoxDomain, FastSlowSystem, GridFunction, Norm, OrbitPath, SystemRef};
use crate::slow_manifold::{ContractionReport, DerivativeSolution, LpSolution};

/// `Ft(xt, y) = F(xt + h(y), y) - Dh(y) g(xt + h(y), y)`, `gt(xt, y) = g(xt + h(y), y)`.
pub struct StraightenedSystem {
    pub base: SystemRef,
    /// `h` on a grid covering the slow paths of interest.
    pub h: GridFunction,
    /// `Dh`, `m x n` column-major per node.
    pub dh: GridFunction,
    name: String,
}

/// Builds the straightened system from converged manifold and derivative solutions.
pub fn straighten(sys: SystemRef, h: &LpSolution, dh: &DerivativeSolution) -> Result<StraightenedSystem> {
    if !h.report.converged || !dh.report.converged {
        return Err(SlowFastError::Precondition("slow manifold or its derivative did not converge".into()));
    }
    straighten_fields(sys, h.extended.clone(), dh.extended.clone())
}

/// Builds the straightened system from grid fields.
pub fn straighten_fields(sys: SystemRef, h: GridFunction, dh: GridFunction) -> Result<StraightenedSystem> {
    let (m, n) = (sys.m(), sys.n());
    if h.dim != m || dh.dim != m * n || h.domain.dim() != n {
        return Err(SlowFastError::Argument("field dimensions do not match the system".into()));
    }
    let dh = if dh.domain == h.domain {
        dh
    } else {
        GridFunction::from_fn(h.domain.clone(), m * n, |y, out| dh.eval_clamped(y, out))
    };
    Ok(StraightenedSystem { name: format!("{}-straight", sys.name()), base: sys, h, dh })
}

impl StraightenedSystem {
    /// `sup |Dh|` from the sup slow norm to the fast norm.
    pub fn dh_sup(&self) -> f64 {
        self.dh.sup_op_norm(self.base.m(), self.base.n(), &Norm::Sup, self.base.fast_norm())
    }

    /// `(1 + |Dh|) N1`, the Lipschitz bound of `gt`.
    pub fn n1(&self, cert: &ConstantsCertificate) -> f64 {
        (1.0 + self.dh_sup()) * cert.n1
    }

    /// Decay rate `mu' = mu - K M1x`.
    pub fn mu_prime(&self, cert: &ConstantsCertificate) -> f64 {
        cert.gap()
    }

    /// `K N1' / (mu' - K N1')`.
    pub fn e_bound(&self, cert: &ConstantsCertificate) -> f64 {
        let kn = cert.k * self.n1(cert);
        kn / (self.mu_prime(cert) - kn)
    }

    fn h_at(&self, y: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.base.m()];
        self.h.eval_clamped(y, &mut v);
        v
    }

    fn dh_at(&self, y: &[f64]) -> DMatrix<f64> {
        let (m, n) = (self.base.m(), self.base.n());
        let mut v = vec![0.0; m * n];
        self.dh.eval_clamped(y, &mut v);
        DMatrix::from_column_slice(m, n, &v)
    }

    fn base_jac(&self, x: &[f64], y: &[f64]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (m, n) = (self.base.m(), self.base.n());
        if self.base.has_jacobians() {
            let mut j = (DMatrix::zeros(m, m), DMatrix::zeros(m, n), DMatrix::zeros(n, m), DMatrix::zeros(n, n));
            if self.base.jac_f(x, y, &mut j.0, &mut j.1).is_ok() && self.base.jac_g(x, y, &mut j.2, &mut j.3).is_ok() {
                return j;
            }
        }
        fd_jacobians(self.base.as_ref(), x, y)
    }

    /// `D gt(xt, y)` as an `n x (m + n)` matrix.
    fn dg_tilde(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        let (m, n) = (self.base.m(), self.base.n());
        let (_, _, gx, gy) = self.base_jac(x, y);
        let mut out = DMatrix::zeros(n, m + n);
        out.view_mut((0, 0), (n, m)).copy_from(&gx);
        out.view_mut((0, m), (n, n)).copy_from(&(&gx * self.dh_at(y) + gy));
        out
    }
}

impl FastSlowSystem for StraightenedSystem {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn m(&self) -> usize {
        self.base.m()
    }
    fn n(&self) -> usize {
        self.base.n()
    }
    fn fast_norm(&self) -> &Norm {
        self.base.fast_norm()
    }
    fn domain(&self) -> &BoxDomain {
        self.base.domain()
    }
    fn f(&self, xt: &[f64], y: &[f64], out: &mut [f64]) {
        let (m, n) = (self.m(), self.n());
        let x: Vec<f64> = xt.iter().zip(self.h_at(y)).map(|(a, b)| a + b).collect();
        self.base.f(&x, y, out);
        let mut gv = vec![0.0; n];
        self.base.g(&x, y, &mut gv);
        let dh = self.dh_at(y);
        for i in 0..m {
            for k in 0..n {
                out[i] -= dh[(i, k)] * gv[k];
            }
        }
    }
    fn g(&self, xt: &[f64], y: &[f64], out: &mut [f64]) {
        let x: Vec<f64> = xt.iter().zip(self.h_at(y)).map(|(a, b)| a + b).collect();
        self.base.g(&x, y, out)
    }
    fn a0(&self, y: &[f64], out: &mut DMatrix<f64>) {
        let h = self.h_at(y);
        let (fx, _, gx, _) = self.base_jac(&h, y);
        out.copy_from(&(fx - self.dh_at(y) * gx));
    }
}

/// Settings of the orbit-local fixed point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub integrator: IntegratorConfig,
    /// Target accuracy of `Q`.
    pub tol_q: f64,
    pub max_iters: usize,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self { integrator: IntegratorConfig::with_step(0.01), tol_q: 1e-10, max_iters: 200 }
    }
}

/// Reduction-map query result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReductionResult {
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    /// `P(xi, eta) = eta - Q`.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// `xt(t)` in the fast track and `q(t)` in the slow track.
    pub q_path: OrbitPath,
    /// `|Q| / |xi|` (zero when `xi = 0`).
    pub e_ratio: f64,
    pub e_bound: f64,
    /// Truncation time `T_f`.
    pub horizon: f64,
    pub report: ContractionReport,
}

fn sup(v: &[f64]) -> f64 {
    Norm::Sup.norm(v)
}

/// Orbit from `(xi + h(eta), eta)` on `[0, t_end]`; slow states must stay on the grid of `h`.
fn orbit_from(ss: &StraightenedSystem, xi: &[f64], eta: &[f64], t_end: f64, cfg: &IntegratorConfig) -> Result<OrbitPath> {
    let x0: Vec<f64> = xi.iter().zip(ss.h_at(eta)).map(|(a, b)| a + b).collect();
    let orbit = flow_with_policy(ss.base.as_ref(), &x0, eta, (0.0, t_end), cfg, DomainPolicy::Extend)?;
    let grid = ss.h.domain.bounds();
    for i in 0..orbit.len() {
        if !grid.contains(orbit.slow_at(i)) {
            return Err(SlowFastError::DomainExit { time: orbit.times[i] });
        }
    }
    Ok(orbit)
}

/// Truncation time: smallest `t` with `K exp(-mu' t) |xi| <= tol_q / (2 N1' (1 + E_bound))`.
pub fn reduction_horizon(ss: &StraightenedSystem, xi: &[f64], cert: &ConstantsCertificate, tol_q: f64) -> f64 {
    let n1 = ss.n1(cert);
    let e = ss.e_bound(cert);
    let xn = ss.base.fast_norm().norm(xi);
    let target = tol_q / (2.0 * n1 * (1.0 + e));
    ((cert.k * xn / target).ln() / ss.mu_prime(cert)).max(1.0)
}

/// `Q(xi, eta)` from `q(t) = int_t^{T_f} [gt(0, y - q) - gt(xt, y)] ds` iterated from `q = 0`.
pub fn q_along_orbit(
    ss: &StraightenedSystem,
    xi: &[f64],
    eta: &[f64],
    cert: &ConstantsCertificate,
    cfg: &ReductionConfig,
) -> Result<ReductionResult> {
    let (m, n) = (ss.m(), ss.n());
    if xi.len() != m || eta.len() != n {
        return Err(SlowFastError::Argument("query has wrong dimensions".into()));
    }
    let n1 = ss.n1(cert);
    let mu_p = ss.mu_prime(cert);
    let kn = cert.k * n1;
    if !(kn * (1.0 + cert.margin) < mu_p) {
        return Err(SlowFastError::Contraction(format!("K N1' = {kn} >= mu' = {mu_p}")));
    }
    let e_bound = ss.e_bound(cert);
    let mut report = ContractionReport {
        iterates: vec![],
        measured_ratio: 0.0,
        theoretical_ratio: kn / mu_p,
        converged: true,
    };
    let trivial = xi.iter().all(|v| *v == 0.0) || n1 == 0.0;
    if trivial {
        ss.h.domain.bounds().check(eta)?;
        let q_path = OrbitPath::new(vec![0.0], xi.to_vec(), vec![0.0; n], m, n, cfg.integrator.step)?;
        return Ok(ReductionResult {
            xi: xi.to_vec(),
            eta: eta.to_vec(),
            p: eta.to_vec(),
            q: vec![0.0; n],
            q_path,
            e_ratio: 0.0,
            e_bound,
            horizon: 0.0,
            report,
        });
    }
    let horizon = reduction_horizon(ss, xi, cert, cfg.tol_q);
    let orbit = orbit_from(ss, xi, eta, horizon, &cfg.integrator)?;
    let len = orbit.len();
    let mut xt = vec![0.0; len * m];
    for i in 0..len {
        let h = ss.h_at(orbit.slow_at(i));
        for k in 0..m {
            xt[i * m + k] = orbit.fast_at(i)[k] - h[k];
        }
    }
    let mut q = vec![0.0; len * n];
    {
        let dt = orbit.times[1] - orbit.times[0];
        let mut g_orbit = vec![0.0; len * n];
        for i in 0..len {
            ss.base.g(orbit.fast_at(i), orbit.slow_at(i), &mut g_orbit[i * n..(i + 1) * n]);
        }
        let mut gp = vec![0.0; n];
        let mut f = vec![vec![0.0; len]; n];
        let mut converged = false;
        for _ in 0..cfg.max_iters {
            for i in 0..len {
                let p: Vec<f64> = (0..n).map(|k| orbit.slow_at(i)[k] - q[i * n + k]).collect();
                let hp = ss.h_at(&p);
                ss.base.g(&hp, &p, &mut gp);
                for k in 0..n {
                    f[k][i] = gp[k] - g_orbit[i * n + k];
                }
            }
            let mut next = vec![0.0; len * n];
            for k in 0..n {
                let c = cumulative_from_end(&f[k], dt);
                for i in 0..len {
                    next[i * n + k] = c[i];
                }
            }
            let res = next.iter().zip(&q).fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
            q = next;
            report.iterates.push(res);
            if res <= 0.1 * cfg.tol_q {
                converged = true;
                break;
            }
        }
        let mut ratios: Vec<f64> =
            report.iterates.windows(2).filter(|w| w[0] > 1e-300 && w[1] > 0.0).map(|w| w[1] / w[0]).collect();
        ratios.sort_by(|a, b| a.total_cmp(b));
        report.measured_ratio = ratios.get(ratios.len() / 2).copied().unwrap_or(0.0);
        report.converged = converged;
        if !converged {
            return Err(SlowFastError::Divergence {
                iters: cfg.max_iters,
                residual: *report.iterates.last().unwrap_or(&f64::NAN),
            });
        }
    }
    let q0 = q[..n].to_vec();
    let p: Vec<f64> = eta.iter().zip(&q0).map(|(a, b)| a - b).collect();
    let xn = ss.base.fast_norm().norm(xi);
    let e_ratio = if xn > 0.0 { sup(&q0) / xn } else { 0.0 };
    let q_path = OrbitPath::new(orbit.times.clone(), xt, q, m, n, cfg.integrator.step)?;
    Ok(ReductionResult { xi: xi.to_vec(), eta: eta.to_vec(), p, q: q0, q_path, e_ratio, e_bound, horizon, report })
}

/// Slow flow on the manifold `y' = g(h(y), y)` from `p`, sampled at the integrator step.
pub fn manifold_flow(ss: &StraightenedSystem, p: &[f64], t_end: f64, cfg: &IntegratorConfig) -> Result<OrbitPath> {
    let (m, n) = (ss.m(), ss.n());
    let mut hx = vec![0.0; m];
    let (times, slow) = integrate_track(
        p,
        0.0,
        t_end,
        cfg,
        |_, y, dy| {
            ss.h.eval_clamped(y, &mut hx);
            ss.base.g(&hx, y, dy);
        },
        |_, _| Ok(()),
    )?;
    let mut fast = vec![0.0; times.len() * m];
    for i in 0..times.len() {
        ss.h.eval_clamped(&slow[i * n..(i + 1) * n], &mut fast[i * m..(i + 1) * m]);
    }
    OrbitPath::new(times, fast, slow, m, n, cfg.step)
}

/// Semiconjugacy check output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SemiconjugacyResidual {
    pub max_residual: f64,
    pub times: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// `max_t |P(orbit(t)) - y(t; (0, P))|` at `samples + 1` times in `[0, t_max]`.
pub fn semiconjugacy_residual(
    ss: &StraightenedSystem,
    result: &ReductionResult,
    cert: &ConstantsCertificate,
    t_max: f64,
    samples: usize,
    cfg: &ReductionConfig,
) -> Result<SemiconjugacyResidual> {
    semiconjugacy_with(ss, result, &result.p, cert, t_max, samples, cfg)
}

/// [`semiconjugacy_residual`] against an arbitrary projected point `p`.
pub fn semiconjugacy_with(
    ss: &StraightenedSystem,
    result: &ReductionResult,
    p: &[f64],
    cert: &ConstantsCertificate,
    t_max: f64,
    samples: usize,
    cfg: &ReductionConfig,
) -> Result<SemiconjugacyResidual> {
    let (m, n) = (ss.m(), ss.n());
    let orbit = orbit_from(ss, &result.xi, &result.eta, t_max, &cfg.integrator)?;
    let slow = manifold_flow(ss, p, t_max, &cfg.integrator)?;
    let mut times = Vec::new();
    let mut residuals = Vec::new();
    for j in 0..=samples {
        let t = t_max * j as f64 / samples.max(1) as f64;
        let i = orbit.nearest_index(t);
        let y = orbit.slow_at(i);
        let h = ss.h_at(y);
        let xt: Vec<f64> = (0..m).map(|k| orbit.fast_at(i)[k] - h[k]).collect();
        let pj = q_along_orbit(ss, &xt, y, cert, cfg)?.p;
        let ys = slow.slow_at(slow.nearest_index(orbit.times[i]));
        times.push(orbit.times[i]);
        residuals.push((0..n).fold(0.0f64, |a, k| a.max((pj[k] - ys[k]).abs())));
    }
    Ok(SemiconjugacyResidual { max_residual: residuals.iter().copied().fold(0.0, f64::max), times, residuals })
}

/// Linear-interpolation error estimate of `h`: `max |second difference| / 8` over nodes and axes.
pub fn interpolation_error_estimate(h: &GridFunction) -> f64 {
    let dom = &h.domain;
    let mut worst = 0.0f64;
    for idx in 0..dom.num_nodes() {
        let mi = dom.multi_index(idx);
        for k in 0..dom.dim() {
            if mi[k] == 0 || mi[k] + 1 >= dom.points[k] {
                continue;
            }
            let mut a = mi.clone();
            a[k] -= 1;
            let mut b = mi.clone();
            b[k] += 1;
            let (va, vb, vc) = (h.node_value(dom.linear_index(&a)), h.node_value(dom.linear_index(&b)), h.node_value(idx));
            for c in 0..h.dim {
                worst = worst.max((va[c] - 2.0 * vc[c] + vb[c]).abs() / 8.0);
            }
        }
    }
    worst
}

/// Attraction-rate fit of `|orbit(t) - projected orbit(t)|`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttractionFit {
    /// Fit of the full gap in the Euclidean product norm.
    pub fit: ExpFit,
    /// Fit of the slow gap `|y(t) - y_P(t)|`, when it rises above the noise floor.
    pub slow_fit: Option<ExpFit>,
    /// `K^2 N1' / (mu - K N1') |xi|`.
    pub slow_prefactor_bound: f64,
    pub noise_floor: f64,
}

/// Fits the decay of `|orbit(t) - (h(y_P(t)), y_P(t))|` over `[0, t_max]`.
pub fn attraction_rate_fit(
    ss: &StraightenedSystem,
    result: &ReductionResult,
    cert: &ConstantsCertificate,
    t_max: f64,
    cfg: &ReductionConfig,
) -> Result<AttractionFit> {
    let (m, n) = (ss.m(), ss.n());
    let orbit = orbit_from(ss, &result.xi, &result.eta, t_max, &cfg.integrator)?;
    let outer = manifold_flow(ss, &result.p, t_max, &cfg.integrator)?;
    let noise_floor = 10.0 * interpolation_error_estimate(&ss.h) + 1e-12;
    let mut full = Vec::with_capacity(orbit.len());
    let mut slow = Vec::with_capacity(orbit.len());
    for i in 0..orbit.len() {
        let j = outer.nearest_index(orbit.times[i]);
        let dx: f64 = (0..m).map(|k| (orbit.fast_at(i)[k] - outer.fast_at(j)[k]).powi(2)).sum();
        let dy: f64 = (0..n).map(|k| (orbit.slow_at(i)[k] - outer.slow_at(j)[k]).powi(2)).sum();
        full.push((orbit.times[i], (dx + dy).sqrt()));
        slow.push((orbit.times[i], dy.sqrt()));
    }
    // Fit only the initial stretch that stays above the floor.
    let cut = |s: &[(f64, f64)]| -> Vec<(f64, f64)> { s.iter().take_while(|p| p.1 > noise_floor).copied().collect() };
    let fit = fit_exponential(&cut(&full), noise_floor)?;
    let slow_fit = fit_exponential(&cut(&slow), noise_floor).ok();
    let kn = cert.k * ss.n1(cert);
    let slow_prefactor_bound = cert.k * kn / (cert.mu - kn) * ss.base.fast_norm().norm(&result.xi);
    Ok(AttractionFit { fit, slow_fit, slow_prefactor_bound, noise_floor })
}

/// `DP(xi, eta) = (0, I) - Q1` as an `n x (m + n)` matrix, with `Q1 = w(0)` from
/// `w' = A w - (A Y1 - Dgt Jt)`, `w(T_f) = 0`, `A = D_y gt(0, p(t))`, `Jt` the straightened
/// first variational flow and `Y1` its slow rows.
pub fn dp_point(
    ss: &StraightenedSystem,
    result: &ReductionResult,
    cert: &ConstantsCertificate,
    cfg: &ReductionConfig,
) -> Result<DMatrix<f64>> {
    let (m, n) = (ss.m(), ss.n());
    let d = m + n;
    let mu_p = ss.mu_prime(cert);
    let n1 = ss.n1(cert);
    if !(2.0 * n1 * (1.0 + cert.margin) < mu_p) {
        return Err(SlowFastError::Infeasible(format!("2 N1' = {} >= mu' = {mu_p}", 2.0 * n1)));
    }
    let mut eye_y = DMatrix::zeros(n, d);
    eye_y.view_mut((0, m), (n, n)).fill_with_identity();
    if n1 == 0.0 {
        return Ok(eye_y);
    }
    // At xi = 0 the orbit lies on the manifold and q vanishes; the horizon is that of a unit xi.
    let on_manifold = result.q_path.len() == 1;
    let horizon = if on_manifold {
        let unit = vec![1.0 / ss.base.fast_norm().norm(&vec![1.0; m]); m];
        reduction_horizon(ss, &unit, cert, cfg.tol_q)
    } else {
        result.horizon
    };
    let base = orbit_from(ss, &result.xi, &result.eta, horizon, &cfg.integrator)?;
    let var = variational_flow(ss.base.as_ref(), &base, 1, &cfg.integrator)?;
    let mut right = DMatrix::<f64>::identity(d, d);
    right.view_mut((0, m), (m, n)).copy_from(&ss.dh_at(&result.eta));
    let len = var.orbit.len();
    let q = &result.q_path;
    if !on_manifold && q.len() != len {
        return Err(SlowFastError::Numeric("q path and variational flow grids differ".into()));
    }
    let zero_q = vec![0.0; n];
    // Coefficients A(t) (n x n) and f(t) = A Y1 - Dgt Jt (n x d) at the samples.
    let stride = n * n + n * d;
    let mut coef = Vec::with_capacity(len * stride);
    for i in 0..len {
        let y = var.orbit.slow_at(i);
        let x = var.orbit.fast_at(i);
        let mut left = DMatrix::<f64>::identity(d, d);
        left.view_mut((0, m), (m, n)).copy_from(&(-ss.dh_at(y)));
        let jt = &left * &var.first[i] * &right;
        let qi = if on_manifold { &zero_q[..] } else { q.slow_at(i) };
        let p: Vec<f64> = (0..n).map(|k| y[k] - qi[k]).collect();
        let hp = ss.h_at(&p);
        let a = ss.dg_tilde(&hp, &p).columns(m, n).into_owned();
        let y1 = jt.rows(m, n).into_owned();
        let f = &a * y1 - ss.dg_tilde(x, y) * &jt;
        coef.extend_from_slice(a.as_slice());
        coef.extend_from_slice(f.as_slice());
    }
    let track = UniformTrack { t0: var.orbit.times[0], h: var.orbit.times[1] - var.orbit.times[0], dim: stride, vals: coef };
    let mut w = vec![0.0; n * d];
    let mut work = Rk4Work::new(n * d);
    let mut c = vec![0.0; stride];
    let hstep = -track.h;
    for k in (1..len).rev() {
        let t = track.t0 + k as f64 * track.h;
        rk4_step(t, hstep, &mut w, &mut work, |tt, ww, dw| {
            track.eval(tt, &mut c);
            let a = DMatrix::from_column_slice(n, n, &c[..n * n]);
            let f = DMatrix::from_column_slice(n, d, &c[n * n..]);
            let r = a * DMatrix::from_column_slice(n, d, ww) - f;
            dw.copy_from_slice(r.as_slice());
        });
    }
    let q1 = DMatrix::from_column_slice(n, d, &w);
    Ok(eye_y - q1)
}

/// Central finite differences of `P` in `(xi, eta)`, step `h`.
pub fn dp_finite_difference(
    ss: &StraightenedSystem,
    xi: &[f64],
    eta: &[f64],
    cert: &ConstantsCertificate,
    cfg: &ReductionConfig,
    h: f64,
) -> Result<DMatrix<f64>> {
    let (m, n) = (ss.m(), ss.n());
    let mut out = DMatrix::zeros(n, m + n);
    for c in 0..m + n {
        let mut xp = xi.to_vec();
        let mut ep = eta.to_vec();
        let mut xm = xi.to_vec();
        let mut em = eta.to_vec();
        let (mut hp, mut hm) = (h, h);
        if c < m {
            xp[c] += h;
            xm[c] -= h;
        } else {
            let k = c - m;
            let dom = ss.domain();
            if eta[k] + h > dom.upper[k] {
                hp = 0.0;
            } else if eta[k] - h < dom.lower[k] {
                hm = 0.0;
            }
            ep[k] += hp;
            em[k] -= hm;
        }
        let pp = q_along_orbit(ss, &xp, &ep, cert, cfg)?.p;
        let pm = q_along_orbit(ss, &xm, &em, cert, cfg)?.p;
        for r in 0..n {
            out[(r, c)] = (pp[r] - pm[r]) / (hp + hm);
        }
    }
    Ok(out)
}

/// Orbit split into its slow-manifold part and the layer correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decomposition {
    pub orbit: OrbitPath,
    /// `(h(y_P(t)), y_P(t))`.
    pub outer: OrbitPath,
    /// `orbit - outer`.
    pub layer: OrbitPath,
    /// Constant `C` of the layer bound.
    pub bound_c: f64,
    /// Worst ratio `|layer(t)| / (C exp(-mu' t / 1.05) |(x0, eta) - (h(P), P)| + floor)`.
    pub bound_ratio: f64,
    /// Interpolation noise floor of `h` added to the bound.
    pub noise_floor: f64,
    /// `max |outer + layer - orbit|`.
    pub reconstruction_error: f64,
}

/// Decomposes the orbit of a reduction query over `[0, t_max]`.
pub fn decompose_orbit(
    ss: &StraightenedSystem,
    result: &ReductionResult,
    cert: &ConstantsCertificate,
    t_max: f64,
    cfg: &ReductionConfig,
) -> Result<Decomposition> {
    let (m, n) = (ss.m(), ss.n());
    let orbit = orbit_from(ss, &result.xi, &result.eta, t_max, &cfg.integrator)?;
    let outer_full = manifold_flow(ss, &result.p, t_max, &cfg.integrator)?;
    let len = orbit.len();
    let mut of = Vec::with_capacity(len * m);
    let mut os = Vec::with_capacity(len * n);
    let mut lf = Vec::with_capacity(len * m);
    let mut ls = Vec::with_capacity(len * n);
    for i in 0..len {
        let j = outer_full.nearest_index(orbit.times[i]);
        of.extend_from_slice(outer_full.fast_at(j));
        os.extend_from_slice(outer_full.slow_at(j));
        for k in 0..m {
            lf.push(orbit.fast_at(i)[k] - outer_full.fast_at(j)[k]);
        }
        for k in 0..n {
            ls.push(orbit.slow_at(i)[k] - outer_full.slow_at(j)[k]);
        }
    }
    let mut recon = 0.0f64;
    for i in 0..len {
        for k in 0..m {
            recon = recon.max((of[i * m + k] + lf[i * m + k] - orbit.fast_at(i)[k]).abs());
        }
        for k in 0..n {
            recon = recon.max((os[i * n + k] + ls[i * n + k] - orbit.slow_at(i)[k]).abs());
        }
    }
    let outer = OrbitPath::new(orbit.times.clone(), of, os, m, n, cfg.integrator.step)?;
    let layer = OrbitPath::new(orbit.times.clone(), lf, ls, m, n, cfg.integrator.step)?;
    let mu_p = ss.mu_prime(cert);
    let kn = cert.k * ss.n1(cert);
    let lh = ss.dh_sup();
    let bound_c = (cert.k + (1.0 + lh) * cert.k * kn / (mu_p - kn)) / (1.0 - lh * result.e_bound).max(1e-3);
    let hp = ss.h_at(&result.p);
    let x0: Vec<f64> = result.xi.iter().zip(ss.h_at(&result.eta)).map(|(a, b)| a + b).collect();
    let d0 = ((0..m).map(|k| (x0[k] - hp[k]).powi(2)).sum::<f64>()
        + (0..n).map(|k| (result.eta[k] - result.p[k]).powi(2)).sum::<f64>())
    .sqrt();
    let noise_floor = 10.0 * interpolation_error_estimate(&ss.h) + 1e-12;
    let mut bound_ratio = 0.0f64;
    for i in 0..len {
        let l = (layer.fast_at(i).iter().map(|v| v * v).sum::<f64>() + layer.slow_at(i).iter().map(|v| v * v).sum::<f64>()).sqrt();
        let b = bound_c * (-mu_p * orbit.times[i] / 1.05).exp() * d0 + noise_floor;
        bound_ratio = bound_ratio.max(l / b);
    }
    Ok(Decomposition { orbit, outer, layer, bound_c, bound_ratio, noise_floor, reconstruction_error: recon })
}

/// Worst ratio `|xt(t)| / (K exp(-mu' (t - s)) |xt(s)|)` over sample pairs of orbits
/// started at the given points.
pub fn fast_decay_ratio(
    ss: &StraightenedSystem,
    starts: &[(Vec<f64>, Vec<f64>)],
    cert: &ConstantsCertificate,
    t_max: f64,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let m = ss.m();
    let norm = ss.base.fast_norm().clone();
    let mu_p = ss.mu_prime(cert);
    let mut worst = 0.0f64;
    for (xi, eta) in starts {
        let orbit = orbit_from(ss, xi, eta, t_max, cfg)?;
        let xt: Vec<f64> = (0..orbit.len())
            .map(|i| {
                let h = ss.h_at(orbit.slow_at(i));
                let v: Vec<f64> = (0..m).map(|k| orbit.fast_at(i)[k] - h[k]).collect();
                norm.norm(&v)
            })
            .collect();
        let stride = (orbit.len() / 50).max(1);
        for a in (0..orbit.len()).step_by(stride) {
            if xt[a] <= 1e-10 {
                continue;
            }
            for b in (a..orbit.len()).step_by(stride) {
                let bound = cert.k * (-mu_p * (orbit.times[b] - orbit.times[a])).exp() * xt[a];
                worst = worst.max(xt[b] / bound);
            }
        }
    }
    Ok(worst)
}
