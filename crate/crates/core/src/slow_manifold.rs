//! Slow manifold `x = h(y)` as the fixed point of the bounded-solution map, its first and
//! second derivative fields, residual diagnostics and the reduced flow.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{sample_points, ConstantsCertificate, SamplingOptions};
use crate::error::{Result, SlowFastError};
use crate::integrate::{
    backward_driver, bounded_endpoint, flow_with_policy, integrate_track, matvec, rk4_step, truncation_horizon,
    DomainPolicy, IntegratorConfig, Rk4Work, UniformTrack,
};
use crate::model::{fd_jacobians, r0_into, FastSlowSystem, GridDomain, GridFunction, Norm, OrbitPath};

/// Fixed-point settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpConfig {
    /// Truncation horizon `T`.
    pub horizon: f64,
    /// Grid on the slow box.
    pub grid: GridDomain,
    pub max_iters: usize,
    /// Sup-norm change between sweeps at which iteration stops.
    pub tol_fixed_point: f64,
    /// `K M0 / mu + delta`.
    pub ball_radius: f64,
    pub integrator: IntegratorConfig,
    /// Cells added below / above the slow box so backward slow paths stay on the grid.
    pub halo_below: Vec<usize>,
    pub halo_above: Vec<usize>,
}

impl LpConfig {
    /// Horizon from the truncation rule with `tol_phi = tol_fixed_point / 100`, no halo.
    pub fn new(
        cert: &ConstantsCertificate,
        grid: GridDomain,
        integrator: IntegratorConfig,
        tol_fixed_point: f64,
    ) -> Result<Self> {
        if !(tol_fixed_point > 0.0) {
            return Err(SlowFastError::Argument("tol_fixed_point must be positive".into()));
        }
        let horizon = truncation_horizon(cert, tol_fixed_point * 1e-2)?;
        let n = grid.dim();
        Ok(Self {
            horizon,
            grid,
            max_iters: 200,
            tol_fixed_point,
            ball_radius: cert.ball_radius(),
            integrator,
            halo_below: vec![0; n],
            halo_above: vec![0; n],
        })
    }

    /// Adds a halo covering `T sup g_i^+` below and `T sup g_i^-` above the box, with `g`
    /// sampled over the box times the fast ball of radius `ball_radius`.
    pub fn with_halo(mut self, sys: &dyn FastSlowSystem, samples: usize, seed: u64) -> Self {
        let n = sys.n();
        let opts = SamplingOptions { samples, x_radius: self.ball_radius, seed };
        let mut up = vec![0.0f64; n];
        let mut down = vec![0.0f64; n];
        let mut gv = vec![0.0; n];
        for (x, y) in sample_points(sys, &opts) {
            sys.g(&x, &y, &mut gv);
            for k in 0..n {
                up[k] = up[k].max(gv[k]);
                down[k] = down[k].max(-gv[k]);
            }
        }
        for k in 0..n {
            let dy = self.grid.spacing(k);
            let cells = |v: f64| if v > 0.0 { (1.05 * self.horizon * v / dy).ceil() as usize + 2 } else { 0 };
            self.halo_below[k] = cells(up[k]);
            self.halo_above[k] = cells(down[k]);
        }
        self
    }

    /// The grid the fixed point is iterated on: the box grid plus the halo.
    pub fn computational_grid(&self) -> GridDomain {
        self.grid.extended(&self.halo_below, &self.halo_above)
    }
}

/// Per-sweep residuals and contraction ratios of a fixed-point iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub iterates: Vec<f64>,
    pub measured_ratio: f64,
    pub theoretical_ratio: f64,
    pub converged: bool,
}

impl ContractionReport {
    fn new(theoretical_ratio: f64) -> Self {
        Self { iterates: Vec::new(), measured_ratio: f64::NAN, theoretical_ratio, converged: false }
    }

    fn finish(&mut self, converged: bool) {
        self.converged = converged;
        let mut ratios: Vec<f64> = self
            .iterates
            .windows(2)
            .filter(|w| w[0] > 0.0 && w[1] > 0.0)
            .map(|w| w[1] / w[0])
            .collect();
        ratios.sort_by(|a, b| a.total_cmp(b));
        self.measured_ratio = if ratios.is_empty() {
            0.0
        } else if ratios.len() % 2 == 1 {
            ratios[ratios.len() / 2]
        } else {
            0.5 * (ratios[ratios.len() / 2 - 1] + ratios[ratios.len() / 2])
        };
    }
}

/// Membership data for the ball `{ |sigma|_inf + Lip(sigma) <= K M0 / mu + delta }`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallCheck {
    pub sup: f64,
    pub lipschitz: f64,
    pub radius: f64,
    pub inside: bool,
}

/// Ball check on the box nodes; the Lipschitz estimate carries a 10% safety factor.
pub fn ball_check(sys: &dyn FastSlowSystem, sigma: &GridFunction, cfg: &LpConfig, margin: f64) -> Result<BallCheck> {
    let on_box = restrict_to_box(sigma, &cfg.grid)?;
    let norm = sys.fast_norm();
    let sup = on_box.sup_norm(norm);
    let lipschitz = on_box.lipschitz_estimate(norm);
    let radius = cfg.ball_radius;
    Ok(BallCheck { sup, lipschitz, radius, inside: sup + 1.1 * lipschitz <= radius * (1.0 + margin) })
}

fn restrict_to_box(sigma: &GridFunction, grid: &GridDomain) -> Result<GridFunction> {
    if &sigma.domain == grid {
        Ok(sigma.clone())
    } else {
        sigma.restrict(grid)
    }
}

/// Brings `sigma` onto the computational grid by clamped interpolation.
fn to_grid(sigma: &GridFunction, grid: &GridDomain) -> GridFunction {
    if &sigma.domain == grid {
        return sigma.clone();
    }
    GridFunction::from_fn(grid.clone(), sigma.dim, |y, out| sigma.eval_clamped(y, out))
}

fn map_nodes(
    grid: &GridDomain,
    dim: usize,
    f: impl Fn(&[f64]) -> Result<Vec<f64>> + Sync,
) -> Result<GridFunction> {
    let nodes = grid.nodes();
    let vals: Vec<Vec<f64>> = nodes.par_iter().map(|y| f(y)).collect::<Result<_>>()?;
    GridFunction::from_nodes(grid.clone(), dim, vals)
}

/// `Lambda(sigma)(eta) = phi(0; eta, sigma)` at every node of `sigma`'s grid.
pub fn lp_map(
    sys: &dyn FastSlowSystem,
    sigma: &GridFunction,
    cert: &ConstantsCertificate,
    cfg: &LpConfig,
) -> Result<GridFunction> {
    if !cert.existence_ok() {
        return Err(SlowFastError::Infeasible("existence budget fails for this certificate".into()));
    }
    let ball = ball_check(sys, sigma, cfg, cert.margin)?;
    if !ball.inside {
        return Err(SlowFastError::Precondition(format!(
            "sigma outside ball: sup {} + 1.1 Lip {} > {}",
            ball.sup, ball.lipschitz, ball.radius
        )));
    }
    lp_map_unchecked(sys, sigma, cfg)
}

fn lp_map_unchecked(sys: &dyn FastSlowSystem, sigma: &GridFunction, cfg: &LpConfig) -> Result<GridFunction> {
    map_nodes(&sigma.domain, sys.m(), |y| {
        bounded_endpoint(sys, sigma, y, cfg.horizon, &cfg.integrator, DomainPolicy::Extend)
    })
}

/// Starting iterate of [`lp_solve`].
#[derive(Clone, Debug)]
pub enum LpInit {
    Zero,
    /// Node-wise Newton root of `F(., y) = 0` continued from zero.
    Newton,
    Given(GridFunction),
}

/// Converged slow manifold.
#[derive(Clone, Debug)]
pub struct LpSolution {
    /// `h` on the box grid.
    pub h: GridFunction,
    /// `h` on the computational grid including the halo.
    pub extended: GridFunction,
    pub report: ContractionReport,
}

/// Jacobi iteration of [`lp_map`] on the computational grid until the box sup-norm change
/// drops below `tol_fixed_point`.
pub fn lp_solve(
    sys: &dyn FastSlowSystem,
    cert: &ConstantsCertificate,
    cfg: &LpConfig,
    init: LpInit,
) -> Result<LpSolution> {
    if !cert.existence_ok() {
        return Err(SlowFastError::Infeasible(format!(
            "existence budget fails: K M1x + N1 (delta+1) = {}, mu = {}, K M1y / (...) vs delta = {}",
            cert.k * cert.m1x + cert.n1 * (cert.delta + 1.0),
            cert.mu,
            cert.delta
        )));
    }
    let grid = cfg.computational_grid();
    let m = sys.m();
    let mut sigma = match init {
        LpInit::Zero => GridFunction::zeros(grid.clone(), m),
        LpInit::Newton => newton_branch(sys, &grid, &vec![0.0; m], 1e-12)?,
        LpInit::Given(s) => to_grid(&s, &grid),
    };
    let ball = ball_check(sys, &sigma, cfg, cert.margin)?;
    if !ball.inside {
        return Err(SlowFastError::Precondition(format!("initial iterate outside ball ({ball:?})")));
    }
    let norm = sys.fast_norm().clone();
    let mut report = ContractionReport::new(cert.lambda_ratio());
    for it in 0..cfg.max_iters {
        let next = lp_map_unchecked(sys, &sigma, cfg)?;
        let res = restrict_to_box(&next, &cfg.grid)?.sup_dist(&restrict_to_box(&sigma, &cfg.grid)?, &norm);
        log::debug!("lp sweep {it}: residual {res:e}");
        report.iterates.push(res);
        sigma = next;
        if res <= cfg.tol_fixed_point {
            report.finish(true);
            return Ok(LpSolution { h: restrict_to_box(&sigma, &cfg.grid)?, extended: sigma, report });
        }
    }
    report.finish(false);
    log::warn!("lp_solve did not converge: {:?}", report.iterates);
    Err(SlowFastError::Divergence { iters: cfg.max_iters, residual: *report.iterates.last().unwrap_or(&f64::NAN) })
}

/// `|Lambda s2 - Lambda s1|_inf / |s2 - s1|_inf` on the box nodes.
pub fn lambda_ratio(
    sys: &dyn FastSlowSystem,
    s1: &GridFunction,
    s2: &GridFunction,
    cert: &ConstantsCertificate,
    cfg: &LpConfig,
) -> Result<f64> {
    let grid = cfg.computational_grid();
    let (a, b) = (to_grid(s1, &grid), to_grid(s2, &grid));
    let la = lp_map(sys, &a, cert, cfg)?;
    let lb = lp_map(sys, &b, cert, cfg)?;
    let norm = sys.fast_norm();
    let num = restrict_to_box(&la, &cfg.grid)?.sup_dist(&restrict_to_box(&lb, &cfg.grid)?, norm);
    let den = a.sup_dist(&b, norm);
    if den == 0.0 {
        return Err(SlowFastError::Argument("identical functions".into()));
    }
    Ok(num / den)
}

/// Max over box nodes of `|h(eta) - int_{-T}^0 T0(0, s) R0(h(psi(s)), psi(s)) ds|`, the integral
/// obtained by solving `v' = A0(psi) v + R0(h(psi), psi)`, `v(-T) = 0`.
pub fn eqv_residual(
    sys: &dyn FastSlowSystem,
    h: &GridFunction,
    cert: &ConstantsCertificate,
    cfg: &LpConfig,
) -> Result<f64> {
    let _ = cert;
    let (m, n) = (sys.m(), sys.n());
    let norm = sys.fast_norm().clone();
    let res: Vec<f64> = cfg
        .grid
        .nodes()
        .par_iter()
        .map(|eta| -> Result<f64> {
            let driver = backward_driver(sys, h, eta, cfg.horizon, &cfg.integrator, DomainPolicy::Extend)?;
            let mut v = vec![0.0; m];
            let mut w = Rk4Work::new(m);
            let mut a = DMatrix::zeros(m, m);
            let mut y = vec![0.0; n];
            let mut hx = vec![0.0; m];
            let mut r = vec![0.0; m];
            for k in 0..driver.len() - 1 {
                let t = driver.t0 + k as f64 * driver.h;
                rk4_step(t, driver.h, &mut v, &mut w, |tt, vv, dv| {
                    driver.eval(tt, &mut y);
                    h.eval_clamped(&y, &mut hx);
                    sys.a0(&y, &mut a);
                    r0_into(sys, &hx, &y, &mut r);
                    matvec(&a, vv, dv);
                    for i in 0..m {
                        dv[i] += r[i];
                    }
                });
            }
            let mut h_eta = vec![0.0; m];
            h.eval_clamped(eta, &mut h_eta);
            Ok(norm.dist(&v, &h_eta))
        })
        .collect::<Result<_>>()?;
    Ok(res.into_iter().fold(0.0, f64::max))
}

/// Graph deviation along the full orbit from `(h(eta), eta)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceResidual {
    pub max_deviation: f64,
    /// Time actually reached.
    pub t_reached: f64,
    /// The orbit left the domain (or the grid of `h`) before `t_max`.
    pub partial: bool,
    pub times: Vec<f64>,
    pub deviations: Vec<f64>,
}

/// Integrates from `(x0, eta)` (default `x0 = h(eta)`) and reports `|x(t) - h(y(t))|`.
pub fn invariance_residual_from(
    sys: &dyn FastSlowSystem,
    h: &GridFunction,
    x0: &[f64],
    eta: &[f64],
    t_max: f64,
    cfg: &IntegratorConfig,
) -> Result<InvarianceResidual> {
    let orbit = match flow_with_policy(sys, x0, eta, (0.0, t_max), cfg, DomainPolicy::Strict) {
        Ok(o) => o,
        Err(SlowFastError::DomainExit { time }) => {
            flow_with_policy(sys, x0, eta, (0.0, time), cfg, DomainPolicy::Extend)?
        }
        Err(e) => return Err(e),
    };
    let norm = sys.fast_norm();
    let mut hx = vec![0.0; sys.m()];
    let mut times = Vec::new();
    let mut deviations = Vec::new();
    let mut partial = orbit.last().0 < t_max - 1e-12;
    for i in 0..orbit.len() {
        if h.eval(orbit.slow_at(i), &mut hx).is_err() {
            partial = true;
            break;
        }
        times.push(orbit.times[i]);
        deviations.push(norm.dist(orbit.fast_at(i), &hx));
    }
    Ok(InvarianceResidual {
        max_deviation: deviations.iter().copied().fold(0.0, f64::max),
        t_reached: times.last().copied().unwrap_or(0.0),
        partial,
        times,
        deviations,
    })
}

/// [`invariance_residual_from`] started on the graph.
pub fn invariance_residual(
    sys: &dyn FastSlowSystem,
    h: &GridFunction,
    eta: &[f64],
    t_max: f64,
    cfg: &IntegratorConfig,
) -> Result<InvarianceResidual> {
    let x0 = h.at(eta)?;
    invariance_residual_from(sys, h, &x0, eta, t_max, cfg)
}

struct Jacs {
    fx: DMatrix<f64>,
    fy: DMatrix<f64>,
    gx: DMatrix<f64>,
    gy: DMatrix<f64>,
}

fn jacobians(sys: &dyn FastSlowSystem, x: &[f64], y: &[f64]) -> Result<Jacs> {
    let (m, n) = (sys.m(), sys.n());
    let mut j = Jacs { fx: DMatrix::zeros(m, m), fy: DMatrix::zeros(m, n), gx: DMatrix::zeros(n, m), gy: DMatrix::zeros(n, n) };
    sys.jac_f(x, y, &mut j.fx, &mut j.fy)?;
    sys.jac_g(x, y, &mut j.gx, &mut j.gy)?;
    Ok(j)
}

/// Backward solve of `u' = f(u)` from `u0` at `t = 0` to `-horizon`, as an increasing-time track.
fn backward_track(
    u0: &[f64],
    horizon: f64,
    cfg: &IntegratorConfig,
    f: impl FnMut(f64, &[f64], &mut [f64]),
) -> Result<UniformTrack> {
    let d = u0.len();
    let (times, vals) = integrate_track(u0, 0.0, -horizon, cfg, f, |_, _| Ok(()))?;
    let len = times.len();
    let mut rev = Vec::with_capacity(len * d);
    for i in (0..len).rev() {
        rev.extend_from_slice(&vals[i * d..(i + 1) * d]);
    }
    let h = if len > 1 { times[0] - times[1] } else { cfg.step };
    Ok(UniformTrack { t0: times[len - 1], h, dim: d, vals: rev })
}

/// Forward RK4 over the track's time grid.
fn forward_on(track: &UniformTrack, u0: Vec<f64>, mut f: impl FnMut(f64, &[f64], &mut [f64])) -> Vec<f64> {
    let mut u = u0;
    let mut w = Rk4Work::new(u.len());
    for k in 0..track.len() - 1 {
        let t = track.t0 + k as f64 * track.h;
        rk4_step(t, track.h, &mut u, &mut w, &mut f);
    }
    u
}

fn mat_of(v: &[f64], r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(r, c, v)
}

/// One application of the derivative map: for each node, `z' = (G_x w(psi) + G_y) z` backward
/// from `z(0) = I`, then `W' = F_x W + F_y z` forward from `W(-T) = w(psi(-T)) z(-T)`;
/// returns `W(0)`. Fields are `m x n` column-major per node.
pub fn dh_map(
    sys: &dyn FastSlowSystem,
    h: &GridFunction,
    w_field: &GridFunction,
    cert: &ConstantsCertificate,
    cfg: &LpConfig,
) -> Result<GridFunction> {
    if !sys.has_jacobians() {
        return Err(SlowFastError::Capability("DF/Dg".into()));
    }
    if !cert.smooth_ok() {
        return Err(SlowFastError::Infeasible("smoothness budget fails for this certificate".into()));
    }
    dh_map_unchecked(sys, h, w_field, cfg)
}

fn dh_map_unchecked(
    sys: &dyn FastSlowSystem,
    h: &GridFunction,
    w_field: &GridFunction,
    cfg: &LpConfig,
) -> Result<GridFunction> {
    let (m, n) = (sys.m(), sys.n());
    map_nodes(&w_field.domain, m * n, |eta| {
        let mut u0 = eta.to_vec();
        u0.extend_from_slice(DMatrix::<f64>::identity(n, n).as_slice());
        let mut hx = vec![0.0; m];
        let mut wv = vec![0.0; m * n];
        let mut err = None;
        let track = backward_track(&u0, cfg.horizon, &cfg.integrator, |_, u, du| {
            let (y, z) = u.split_at(n);
            h.eval_clamped(y, &mut hx);
            w_field.eval_clamped(y, &mut wv);
            sys.g(&hx, y, &mut du[..n]);
            match jacobians(sys, &hx, y) {
                Ok(j) => {
                    let gen = &j.gx * mat_of(&wv, m, n) + &j.gy;
                    let dz = gen * mat_of(z, n, n);
                    du[n..].copy_from_slice(dz.as_slice());
                }
                Err(e) => err = Some(e),
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        let first = track.row(0);
        w_field.eval_clamped(&first[..n], &mut wv);
        let w0 = mat_of(&wv, m, n) * mat_of(&first[n..], n, n);
        let mut u = vec![0.0; n + n * n];
        let mut err = None;
        let out = forward_on(&track, w0.as_slice().to_vec(), |t, wp, dw| {
            track.eval(t, &mut u);
            let (y, z) = u.split_at(n);
            h.eval_clamped(y, &mut hx);
            match jacobians(sys, &hx, y) {
                Ok(j) => {
                    let d = &j.fx * mat_of(wp, m, n) + &j.fy * mat_of(z, n, n);
                    dw.copy_from_slice(d.as_slice());
                }
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    })
}

/// Derivative field with its iteration report.
#[derive(Clone, Debug)]
pub struct DerivativeSolution {
    /// Field on the box grid.
    pub field: GridFunction,
    /// Field on the grid of the `h` it was computed from.
    pub extended: GridFunction,
    pub report: ContractionReport,
}

fn iterate_field(
    sys: &dyn FastSlowSystem,
    cfg: &LpConfig,
    mut field: GridFunction,
    theoretical: f64,
    rows: usize,
    cols: usize,
    step: impl Fn(&GridFunction) -> Result<GridFunction>,
) -> Result<DerivativeSolution> {
    let mut report = ContractionReport::new(theoretical);
    let norm = sys.fast_norm().clone();
    for it in 0..cfg.max_iters {
        let next = step(&field)?;
        let diff = GridFunction {
            domain: cfg.grid.clone(),
            dim: rows * cols,
            values: {
                let a = restrict_to_box(&next, &cfg.grid)?;
                let b = restrict_to_box(&field, &cfg.grid)?;
                a.values.iter().zip(&b.values).map(|(p, q)| p - q).collect()
            },
        };
        let res = diff.sup_op_norm(rows, cols, &Norm::Sup, &norm);
        log::debug!("derivative sweep {it}: residual {res:e}");
        report.iterates.push(res);
        field = next;
        if res <= cfg.tol_fixed_point {
            report.finish(true);
            return Ok(DerivativeSolution { field: restrict_to_box(&field, &cfg.grid)?, extended: field, report });
        }
    }
    report.finish(false);
    Err(SlowFastError::Divergence { iters: cfg.max_iters, residual: *report.iterates.last().unwrap_or(&f64::NAN) })
}

/// Fixed point of [`dh_map`] starting from zero, on the grid of `h` (pass the extended `h`).
pub fn dh_solve(
    sys: &dyn FastSlowSystem,
    h: &GridFunction,
    cert: &ConstantsCertificate,
    cfg: &LpConfig,
) -> Result<DerivativeSolution> {
    if !sys.has_jacobians() {
        return Err(SlowFastError::Capability("DF/Dg".into()));
    }
    if !cert.smooth_ok() {
        return Err(SlowFastError::Infeasible(format!("smoothness budget fails at rho = {}", cert.rho)));
    }
    let (m, n) = (sys.m(), sys.n());
    let w0 = GridFunction::zeros(h.domain.clone(), m * n);
    iterate_field(sys, cfg, w0, cert.gamma_ratio(), m, n, |w| dh_map_unchecked(sys, h, w, cfg))
}

/// `H[a, b]` for a field value `H` of size `m x n x n` at index `i + m (j + n k)`.
fn bilinear(hv: &[f64], m: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out[..m].iter_mut().for_each(|v| *v = 0.0);
    for k in 0..n {
        for j in 0..n {
            let c = a[j] * b[k];
            if c == 0.0 {
                continue;
            }
            let off = m * (j + n * k);
            for i in 0..m {
                out[i] += hv[off + i] * c;
            }
        }
    }
}

/// Second-derivative field `D^2 h`, size `m x n x n` per node at index `i + m (j + n k)`.
///
/// Backward: `z1' = (G_x Dh + G_y) z1`, `z2' = (G_x Dh + G_y) z2 + G_x H2[z1, z1] + D^2 g[(Dh z1, z1)^2]`
/// from `z1(0) = I`, `z2(0) = 0`. Forward: `X1' = F_x X1 + F_y z1`,
/// `W2' = F_x W2 + F_y z2 + D^2 F[(X1, z1)^2]` from `X1(-T) = Dh z1`, `W2(-T) = H2[z1, z1] + Dh z2`.
pub fn d2h_map(
    sys: &dyn FastSlowSystem,
    h: &GridFunction,
    dh: &GridFunction,
    h2_field: &GridFunction,
    cfg: &LpConfig,
) -> Result<GridFunction> {
    if !sys.has_hessians() || !sys.has_jacobians() {
        return Err(SlowFastError::Capability("D2F/D2g".into()));
    }
    let (m, n) = (sys.m(), sys.n());
    let d = m + n;
    let nn = n * n;
    map_nodes(&h2_field.domain, m * nn, |eta| {
        // State: y (n), z1 (n x n), z2 (n x n x n).
        let mut u0 = eta.to_vec();
        u0.extend_from_slice(DMatrix::<f64>::identity(n, n).as_slice());
        u0.extend(std::iter::repeat(0.0).take(n * nn));
        let mut hx = vec![0.0; m];
        let mut dhv = vec![0.0; m * n];
        let mut h2v = vec![0.0; m * nn];
        let mut tmp_m = vec![0.0; m];
        let mut tmp_n = vec![0.0; n];
        let mut ua = vec![0.0; d];
        let mut ub = vec![0.0; d];
        let mut err = None;
        let track = backward_track(&u0, cfg.horizon, &cfg.integrator, |_, u, du| {
            let (y, rest) = u.split_at(n);
            let (z1, z2) = rest.split_at(nn);
            h.eval_clamped(y, &mut hx);
            dh.eval_clamped(y, &mut dhv);
            h2_field.eval_clamped(y, &mut h2v);
            sys.g(&hx, y, &mut du[..n]);
            let j = match jacobians(sys, &hx, y) {
                Ok(j) => j,
                Err(e) => {
                    err = Some(e);
                    return;
                }
            };
            let dhm = mat_of(&dhv, m, n);
            let gen = &j.gx * &dhm + &j.gy;
            let z1m = mat_of(z1, n, n);
            let w1 = &dhm * &z1m;
            du[n..n + nn].copy_from_slice((&gen * &z1m).as_slice());
            for k in 0..n {
                for jj in 0..n {
                    let off = n * (jj + n * k);
                    let out = &mut du[n + nn + off..n + nn + off + n];
                    matvec(&gen, &z2[off..off + n], out);
                    bilinear(&h2v, m, n, z1m.column(jj).as_slice(), z1m.column(k).as_slice(), &mut tmp_m);
                    let gxh = &j.gx * nalgebra::DVector::from_column_slice(&tmp_m);
                    ua[..m].copy_from_slice(w1.column(jj).as_slice());
                    ua[m..].copy_from_slice(z1m.column(jj).as_slice());
                    ub[..m].copy_from_slice(w1.column(k).as_slice());
                    ub[m..].copy_from_slice(z1m.column(k).as_slice());
                    if let Err(e) = sys.hess_g(&hx, y, &ua, &ub, &mut tmp_n) {
                        err = Some(e);
                    }
                    for a in 0..n {
                        out[a] += gxh[a] + tmp_n[a];
                    }
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        // Forward: X1 (m x n), W2 (m x n x n).
        let first = track.row(0);
        let (y0, rest) = first.split_at(n);
        let (z1, z2) = rest.split_at(nn);
        dh.eval_clamped(y0, &mut dhv);
        h2_field.eval_clamped(y0, &mut h2v);
        let dhm = mat_of(&dhv, m, n);
        let z1m = mat_of(z1, n, n);
        let mut v0 = (&dhm * &z1m).as_slice().to_vec();
        let mut w2 = vec![0.0; m * nn];
        for k in 0..n {
            for jj in 0..n {
                let off = m * (jj + n * k);
                bilinear(&h2v, m, n, z1m.column(jj).as_slice(), z1m.column(k).as_slice(), &mut tmp_m);
                let zoff = n * (jj + n * k);
                matvec(&dhm, &z2[zoff..zoff + n], &mut w2[off..off + m]);
                for i in 0..m {
                    w2[off + i] += tmp_m[i];
                }
            }
        }
        v0.extend_from_slice(&w2);
        let mut u = vec![0.0; n + nn + n * nn];
        let mut err = None;
        let out = forward_on(&track, v0, |t, v, dv| {
            track.eval(t, &mut u);
            let (y, rest) = u.split_at(n);
            let (z1, z2) = rest.split_at(nn);
            h.eval_clamped(y, &mut hx);
            let j = match jacobians(sys, &hx, y) {
                Ok(j) => j,
                Err(e) => {
                    err = Some(e);
                    return;
                }
            };
            let (x1, w2) = v.split_at(m * n);
            let (dx1, dw2) = dv.split_at_mut(m * n);
            let x1m = mat_of(x1, m, n);
            let z1m = mat_of(z1, n, n);
            dx1.copy_from_slice((&j.fx * &x1m + &j.fy * &z1m).as_slice());
            for k in 0..n {
                for jj in 0..n {
                    let off = m * (jj + n * k);
                    let zoff = n * (jj + n * k);
                    let o = &mut dw2[off..off + m];
                    matvec(&j.fx, &w2[off..off + m], o);
                    matvec(&j.fy, &z2[zoff..zoff + n], &mut tmp_m);
                    for i in 0..m {
                        o[i] += tmp_m[i];
                    }
                    ua[..m].copy_from_slice(x1m.column(jj).as_slice());
                    ua[m..].copy_from_slice(z1m.column(jj).as_slice());
                    ub[..m].copy_from_slice(x1m.column(k).as_slice());
                    ub[m..].copy_from_slice(z1m.column(k).as_slice());
                    if let Err(e) = sys.hess_f(&hx, y, &ua, &ub, &mut tmp_m) {
                        err = Some(e);
                    }
                    for i in 0..m {
                        o[i] += tmp_m[i];
                    }
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out[m * n..].to_vec()),
        }
    })
}

/// Fixed point of [`d2h_map`] from zero; needs `2 N1 < mu - K M1x` and the smoothness budget.
pub fn d2h_solve(
    sys: &dyn FastSlowSystem,
    h: &GridFunction,
    dh: &GridFunction,
    cert: &ConstantsCertificate,
    cfg: &LpConfig,
) -> Result<DerivativeSolution> {
    if !sys.has_hessians() {
        return Err(SlowFastError::Capability("D2F/D2g".into()));
    }
    if !cert.second_order_ok() {
        return Err(SlowFastError::Infeasible(format!(
            "second-order budget fails: 2 N1 = {} vs mu - K M1x = {}",
            2.0 * cert.n1,
            cert.gap()
        )));
    }
    let (m, n) = (sys.m(), sys.n());
    let dh = to_grid(dh, &h.domain);
    let theoretical = cert.k * cert.m1x.max(cert.m1y) / (cert.gap() - 2.0 * cert.n1 * (cert.rho + 1.0)).max(1e-300);
    let h2 = GridFunction::zeros(h.domain.clone(), m * n * n);
    iterate_field(sys, cfg, h2, theoretical, m, n * n, |w| d2h_map(sys, h, &dh, w, cfg))
}

/// Central differences of a grid field along every slow axis (one-sided second order at the
/// edges); the result has `dim * n` components with axis `k` at offset `dim * k`.
pub fn central_differences(f: &GridFunction) -> GridFunction {
    let dom = &f.domain;
    let n = dom.dim();
    let d = f.dim;
    let mut out = GridFunction::zeros(dom.clone(), d * n);
    for idx in 0..dom.num_nodes() {
        let mi = dom.multi_index(idx);
        for k in 0..n {
            let p = dom.points[k];
            let hk = dom.spacing(k);
            let at = |shift: isize| -> &[f64] {
                let mut mj = mi.clone();
                mj[k] = (mi[k] as isize + shift) as usize;
                f.node_value(dom.linear_index(&mj))
            };
            let i = mi[k];
            let vals: Vec<f64> = (0..d)
                .map(|c| {
                    if p < 3 {
                        let (a, b) = if i == 0 { (at(0), at(1)) } else { (at(-1), at(0)) };
                        (b[c] - a[c]) / hk
                    } else if i == 0 {
                        (-3.0 * at(0)[c] + 4.0 * at(1)[c] - at(2)[c]) / (2.0 * hk)
                    } else if i == p - 1 {
                        (3.0 * at(0)[c] - 4.0 * at(-1)[c] + at(-2)[c]) / (2.0 * hk)
                    } else {
                        (at(1)[c] - at(-1)[c]) / (2.0 * hk)
                    }
                })
                .collect();
            out.node_value_mut(idx)[d * k..d * (k + 1)].copy_from_slice(&vals);
        }
    }
    out
}

/// Node-wise Newton root of `F(., y) = 0`, continued along the node order from `x_guess`.
pub fn newton_branch(sys: &dyn FastSlowSystem, grid: &GridDomain, x_guess: &[f64], tol: f64) -> Result<GridFunction> {
    let m = sys.m();
    let mut vals = Vec::with_capacity(grid.num_nodes());
    let mut x = x_guess.to_vec();
    for y in grid.nodes() {
        x = newton_root(sys, &x, &y, tol)?;
        vals.push(x.clone());
    }
    GridFunction::from_nodes(grid.clone(), m, vals)
}

/// Newton iteration for `F(x, y) = 0` at fixed `y`.
pub fn newton_root(sys: &dyn FastSlowSystem, x0: &[f64], y: &[f64], tol: f64) -> Result<Vec<f64>> {
    let (m, n) = (sys.m(), sys.n());
    let mut x = x0.to_vec();
    let mut f = vec![0.0; m];
    for _ in 0..100 {
        sys.f(&x, y, &mut f);
        let fx = if sys.has_jacobians() {
            let mut fx = DMatrix::zeros(m, m);
            let mut fy = DMatrix::zeros(m, n);
            sys.jac_f(&x, y, &mut fx, &mut fy)?;
            fx
        } else {
            fd_jacobians(sys, &x, y).0
        };
        let dx = fx
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(&f))
            .ok_or_else(|| SlowFastError::Numeric(format!("singular D_xF at y = {y:?}")))?;
        let step = dx.amax();
        for i in 0..m {
            x[i] -= dx[i];
        }
        if step <= tol * (1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
            return Ok(x);
        }
    }
    Err(SlowFastError::Numeric(format!("Newton did not converge at y = {y:?}")))
}

/// Reduced flow `dy/dtau = g(h0(y), y) / eps` (slow time `tau = eps t`, `g = eps * g_hat`),
/// lifted to `x = h0(y)`.
pub fn reduced_flow(
    sys: &dyn FastSlowSystem,
    h0: &GridFunction,
    eta: &[f64],
    tau_span: (f64, f64),
    eps: f64,
    cfg: &IntegratorConfig,
) -> Result<OrbitPath> {
    if !(eps > 0.0) {
        return Err(SlowFastError::Argument("eps must be positive".into()));
    }
    let (m, n) = (sys.m(), sys.n());
    sys.domain().check(eta)?;
    let dom = sys.domain().clone();
    let mut hx = vec![0.0; m];
    let (times, vals) = integrate_track(
        eta,
        tau_span.0,
        tau_span.1,
        cfg,
        |_, y, dy| {
            h0.eval_clamped(y, &mut hx);
            sys.g(&hx, y, dy);
            dy.iter_mut().for_each(|v| *v /= eps);
        },
        |t, y| if dom.contains(y) { Ok(()) } else { Err(SlowFastError::DomainExit { time: t }) },
    )?;
    let mut fast = vec![0.0; times.len() * m];
    for i in 0..times.len() {
        h0.eval_clamped(&vals[i * n..(i + 1) * n], &mut fast[i * m..(i + 1) * m]);
    }
    OrbitPath::new(times, fast, vals, m, n, cfg.step)
}
