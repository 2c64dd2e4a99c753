//! Fixed-step RK4 integration of full systems, slow subsystems, linear processes,
//! variational flows and bounded solutions along slow drivers.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::certify::ConstantsCertificate;
use crate::error::{Result, SlowFastError};
use crate::model::{r0_into, FastSlowSystem, GridFunction, OrbitPath};

/// Integration method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Rk4,
}

/// Fixed-step integrator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub step: f64,
    pub method: Method,
    pub richardson_check: bool,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { step: 0.01, method: Method::Rk4, richardson_check: false, max_steps: 10_000_000 }
    }
}

impl IntegratorConfig {
    /// Config with step `dt`.
    pub fn with_step(dt: f64) -> Self {
        Self { step: dt, ..Self::default() }
    }

    /// Default step `min(0.01, 0.1 / (mu + N1 * diameter))`.
    pub fn default_step(mu: f64, n1: f64, diameter: f64) -> f64 {
        0.01f64.min(0.1 / (mu + n1 * diameter))
    }

    fn steps_for(&self, span: f64) -> Result<usize> {
        if !(self.step > 0.0) || !span.is_finite() {
            return Err(SlowFastError::Argument("step must be positive and span finite".into()));
        }
        let n = (span.abs() / self.step).ceil().max(1.0) as usize;
        if n > self.max_steps {
            return Err(SlowFastError::Argument(format!("{n} steps exceed max_steps {}", self.max_steps)));
        }
        Ok(n)
    }
}

/// What happens when a slow path leaves the slow box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainPolicy {
    /// Stop with a domain-exit error.
    Strict,
    /// Keep integrating; grid functions are evaluated at the nearest box point.
    Extend,
}

/// Scratch buffers for one RK4 step.
pub struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

/// One classical RK4 step of `u' = f(t, u)` from `t` with step `h` (may be negative).
pub fn rk4_step<F: FnMut(f64, &[f64], &mut [f64])>(t: f64, h: f64, u: &mut [f64], w: &mut Rk4Work, mut f: F) {
    let d = u.len();
    f(t, u, &mut w.k1);
    for i in 0..d {
        w.tmp[i] = u[i] + 0.5 * h * w.k1[i];
    }
    f(t + 0.5 * h, &w.tmp, &mut w.k2);
    for i in 0..d {
        w.tmp[i] = u[i] + 0.5 * h * w.k2[i];
    }
    f(t + 0.5 * h, &w.tmp, &mut w.k3);
    for i in 0..d {
        w.tmp[i] = u[i] + h * w.k3[i];
    }
    f(t + h, &w.tmp, &mut w.k4);
    for i in 0..d {
        u[i] += h / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
    }
}

/// Uniformly sampled vector track with four-point Lagrange interpolation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformTrack {
    pub t0: f64,
    pub h: f64,
    pub dim: usize,
    /// Row-major `len x dim`.
    pub vals: Vec<f64>,
}

impl UniformTrack {
    pub fn len(&self) -> usize {
        self.vals.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.h * (self.len() - 1) as f64
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vals[i * self.dim..(i + 1) * self.dim]
    }

    /// Value at `t`; exact at sample times, fourth order in between, clamped outside.
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let n = self.len();
        let s = (t - self.t0) / self.h;
        let r = s.round();
        if (s - r).abs() < 1e-9 && r >= 0.0 && (r as usize) < n {
            out.copy_from_slice(self.row(r as usize));
            return;
        }
        if n < 4 {
            let i = (s.floor().max(0.0) as usize).min(n.saturating_sub(2));
            let f = (s - i as f64).clamp(0.0, 1.0);
            let j = (i + 1).min(n - 1);
            for k in 0..self.dim {
                out[k] = (1.0 - f) * self.row(i)[k] + f * self.row(j)[k];
            }
            return;
        }
        let s = s.clamp(0.0, (n - 1) as f64);
        let base = (s.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
        let x = s - base as f64;
        let l0 = -(x - 1.0) * (x - 2.0) * (x - 3.0) / 6.0;
        let l1 = x * (x - 2.0) * (x - 3.0) / 2.0;
        let l2 = -x * (x - 1.0) * (x - 3.0) / 2.0;
        let l3 = x * (x - 1.0) * (x - 2.0) / 6.0;
        let (r0, r1, r2, r3) = (self.row(base), self.row(base + 1), self.row(base + 2), self.row(base + 3));
        for k in 0..self.dim {
            out[k] = l0 * r0[k] + l1 * r1[k] + l2 * r2[k] + l3 * r3[k];
        }
    }
}

/// Integrates `u' = f(t, u)` from `t0` to `t1` with `ceil(|t1 - t0| / dt)` equal steps and
/// returns the samples in the order visited.
pub fn integrate_track<F: FnMut(f64, &[f64], &mut [f64])>(
    u0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
    mut f: F,
    mut check: impl FnMut(f64, &[f64]) -> Result<()>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let nsteps = cfg.steps_for(t1 - t0)?;
    let h = (t1 - t0) / nsteps as f64;
    let d = u0.len();
    let mut u = u0.to_vec();
    let mut w = Rk4Work::new(d);
    let mut times = Vec::with_capacity(nsteps + 1);
    let mut vals = Vec::with_capacity((nsteps + 1) * d);
    times.push(t0);
    vals.extend_from_slice(&u);
    for k in 0..nsteps {
        let t = t0 + k as f64 * h;
        rk4_step(t, h, &mut u, &mut w, &mut f);
        let tn = if k + 1 == nsteps { t1 } else { t0 + (k + 1) as f64 * h };
        if u.iter().any(|v| !v.is_finite()) {
            return Err(SlowFastError::Numeric(format!("non-finite state at t = {tn}")));
        }
        check(tn, &u)?;
        times.push(tn);
        vals.extend_from_slice(&u);
    }
    Ok((times, vals))
}

/// Splits joint `(x, y)` samples into an [`OrbitPath`], reversing if time runs backward.
fn orbit_from_joint(times: Vec<f64>, vals: Vec<f64>, m: usize, n: usize, step: f64) -> Result<OrbitPath> {
    let d = m + n;
    let len = times.len();
    let order: Vec<usize> = if len > 1 && times[1] < times[0] { (0..len).rev().collect() } else { (0..len).collect() };
    let mut t = Vec::with_capacity(len);
    let mut fast = Vec::with_capacity(len * m);
    let mut slow = Vec::with_capacity(len * n);
    for i in order {
        t.push(times[i]);
        fast.extend_from_slice(&vals[i * d..i * d + m]);
        slow.extend_from_slice(&vals[i * d + m..(i + 1) * d]);
    }
    OrbitPath::new(t, fast, slow, m, n, step)
}

/// Solution of the full system from `(x0, y0)` over `t_span`.
pub fn flow(
    sys: &dyn FastSlowSystem,
    x0: &[f64],
    y0: &[f64],
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<OrbitPath> {
    flow_with_policy(sys, x0, y0, t_span, cfg, DomainPolicy::Strict)
}

/// [`flow`] with an explicit domain policy.
pub fn flow_with_policy(
    sys: &dyn FastSlowSystem,
    x0: &[f64],
    y0: &[f64],
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
    policy: DomainPolicy,
) -> Result<OrbitPath> {
    let (m, n) = (sys.m(), sys.n());
    if x0.len() != m || y0.len() != n {
        return Err(SlowFastError::Argument("initial state has wrong dimensions".into()));
    }
    sys.domain().check(y0)?;
    let mut u0 = x0.to_vec();
    u0.extend_from_slice(y0);
    let dom = sys.domain().clone();
    let (times, vals) = integrate_track(
        &u0,
        t_span.0,
        t_span.1,
        cfg,
        |_, u, du| {
            let (x, y) = u.split_at(m);
            let (dx, dy) = du.split_at_mut(m);
            sys.f(x, y, dx);
            sys.g(x, y, dy);
        },
        |t, u| {
            if policy == DomainPolicy::Strict && !dom.contains(&u[m..]) {
                Err(SlowFastError::DomainExit { time: t })
            } else {
                Ok(())
            }
        },
    )?;
    let mut path = orbit_from_joint(times, vals, m, n, cfg.step)?;
    path.horizon = Some((t_span.1 - t_span.0).abs());
    Ok(path)
}

/// Observed Richardson ratio `|u_h - u_{h/2}| / |u_{h/2} - u_{h/4}|` at the end of `t_span`
/// (about 16 for a fourth-order method).
pub fn richardson_ratio(
    sys: &dyn FastSlowSystem,
    x0: &[f64],
    y0: &[f64],
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let end = |dt: f64| -> Result<Vec<f64>> {
        let c = IntegratorConfig { step: dt, ..cfg.clone() };
        let p = flow_with_policy(sys, x0, y0, t_span, &c, DomainPolicy::Extend)?;
        let (_, x, y) = p.last();
        Ok(x.iter().chain(y).copied().collect())
    };
    let a = end(cfg.step)?;
    let b = end(cfg.step / 2.0)?;
    let c = end(cfg.step / 4.0)?;
    let d1 = a.iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    let d2 = b.iter().zip(&c).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    Ok(d1 / d2)
}

/// Slow path `psi' = g(sigma(psi), psi)`, `psi(0) = eta`, over the hull of `t_span` and 0, in increasing time.
///
/// The fast track of the returned path holds `sigma(psi(t))`.
pub fn slow_ivp(
    sys: &dyn FastSlowSystem,
    sigma: &GridFunction,
    eta: &[f64],
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<OrbitPath> {
    slow_ivp_with_policy(sys, sigma, eta, t_span, cfg, DomainPolicy::Strict)
}

/// [`slow_ivp`] with an explicit domain policy.
pub fn slow_ivp_with_policy(
    sys: &dyn FastSlowSystem,
    sigma: &GridFunction,
    eta: &[f64],
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
    policy: DomainPolicy,
) -> Result<OrbitPath> {
    let (m, n) = (sys.m(), sys.n());
    sys.domain().check(eta)?;
    let mut segments: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let dom = sys.domain().clone();
    let mut sx = vec![0.0; m];
    let rhs = |_: f64, y: &[f64], dy: &mut [f64], sx: &mut Vec<f64>| {
        sigma.eval_clamped(y, sx);
        sys.g(sx, y, dy);
    };
    let (lo, hi) = (t_span.0.min(t_span.1).min(0.0), t_span.0.max(t_span.1).max(0.0));
    for (a, b) in [(0.0, lo), (0.0, hi)] {
        if a == b {
            segments.push((vec![0.0], eta.to_vec()));
            continue;
        }
        let seg = integrate_track(
            eta,
            a,
            b,
            cfg,
            |t, y, dy| rhs(t, y, dy, &mut sx),
            |t, y| {
                if policy == DomainPolicy::Strict && !dom.contains(y) {
                    Err(SlowFastError::DomainExit { time: t })
                } else {
                    Ok(())
                }
            },
        )?;
        segments.push(seg);
    }
    // Merge the backward (reversed) and forward segments around t = 0.
    let (bt, bv) = &segments[0];
    let (ft, fv) = &segments[1];
    let mut times = Vec::new();
    let mut slow = Vec::new();
    for i in (0..bt.len()).rev() {
        if bt[i] < 0.0 || (i == 0 && bt.len() == 1) || (bt[i] == 0.0 && ft.len() <= 1) {
            times.push(bt[i]);
            slow.extend_from_slice(&bv[i * n..(i + 1) * n]);
        }
    }
    for i in 0..ft.len() {
        if ft[i] > 0.0 || (ft[i] == 0.0 && !times.contains(&0.0)) {
            times.push(ft[i]);
            slow.extend_from_slice(&fv[i * n..(i + 1) * n]);
        }
    }
    let mut fast = vec![0.0; times.len() * m];
    for i in 0..times.len() {
        sigma.eval_clamped(&slow[i * n..(i + 1) * n], &mut fast[i * m..(i + 1) * m]);
    }
    OrbitPath::new(times, fast, slow, m, n, cfg.step)
}

/// Slow driver of a process.
#[derive(Clone)]
pub enum Driver {
    /// Sampled path.
    Track(UniformTrack),
    /// Closed-form path `t -> psi(t)`.
    Closed { dim: usize, path: Arc<dyn Fn(f64, &mut [f64]) + Send + Sync> },
}

impl Driver {
    pub fn dim(&self) -> usize {
        match self {
            Driver::Track(t) => t.dim,
            Driver::Closed { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, t: f64, out: &mut [f64]) {
        match self {
            Driver::Track(tr) => tr.eval(t, out),
            Driver::Closed { path, .. } => path(t, out),
        }
    }

    /// Driver that stays at `y` for all times.
    pub fn frozen(y: Vec<f64>) -> Self {
        let dim = y.len();
        Driver::Closed { dim, path: Arc::new(move |_, out| out.copy_from_slice(&y)) }
    }

    /// Slow track of an orbit path with uniform sampling.
    pub fn from_orbit(path: &OrbitPath) -> Result<Self> {
        if path.len() < 2 {
            return Err(SlowFastError::Argument("driver needs at least two samples".into()));
        }
        let h = path.times[1] - path.times[0];
        if path.times.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.abs().max(1e-12)) {
            return Err(SlowFastError::Argument("driver samples must be uniform".into()));
        }
        Ok(Driver::Track(UniformTrack { t0: path.times[0], h, dim: path.n, vals: path.slow.clone() }))
    }
}

/// Which linearization generates a process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// `A0(psi(t))`, forward only.
    A0,
    /// `D_xF(h(psi(t)), psi(t))`, forward only.
    Ah,
    /// Slow-projection linearization; reversible.
    Z,
}

type GeneratorFn = dyn Fn(&[f64], &mut DMatrix<f64>) + Send + Sync;

/// Two-parameter family `T(t, s)` of solution operators of `x' = A(psi(t)) x`.
#[derive(Clone)]
pub struct ProcessHandle {
    pub driver: Driver,
    pub kind: GeneratorKind,
    pub dim: usize,
    pub step: f64,
    generator: Arc<GeneratorFn>,
}

impl ProcessHandle {
    /// Process with an arbitrary generator `A(psi)` of size `dim`.
    pub fn custom(
        kind: GeneratorKind,
        dim: usize,
        driver: Driver,
        step: f64,
        generator: impl Fn(&[f64], &mut DMatrix<f64>) + Send + Sync + 'static,
    ) -> Self {
        Self { driver, kind, dim, step, generator: Arc::new(generator) }
    }

    /// Process of `A0(psi(t))`.
    pub fn a0(sys: Arc<dyn FastSlowSystem>, driver: Driver, step: f64) -> Self {
        let m = sys.m();
        Self::custom(GeneratorKind::A0, m, driver, step, move |y, out| sys.a0(y, out))
    }

    /// Process of `D_xF(h(psi(t)), psi(t))`; requires Jacobians.
    pub fn ah(sys: Arc<dyn FastSlowSystem>, h: GridFunction, driver: Driver, step: f64) -> Result<Self> {
        if !sys.has_jacobians() {
            return Err(SlowFastError::Capability("DF".into()));
        }
        let (m, n) = (sys.m(), sys.n());
        Ok(Self::custom(GeneratorKind::Ah, m, driver, step, move |y, out| {
            let mut x = vec![0.0; m];
            h.eval_clamped(y, &mut x);
            let mut dy = DMatrix::zeros(m, n);
            let _ = sys.jac_f(&x, y, out, &mut dy);
        }))
    }

    /// Generator matrix at time `t`.
    pub fn generator_at(&self, t: f64, out: &mut DMatrix<f64>) {
        let mut y = vec![0.0; self.driver.dim()];
        self.driver.eval(t, &mut y);
        (self.generator)(&y, out)
    }

    /// `T(t, s) xi`.
    pub fn apply(&self, t: f64, s: f64, xi: &[f64]) -> Result<Vec<f64>> {
        if t < s && self.kind != GeneratorKind::Z {
            return Err(SlowFastError::Order { t, s });
        }
        if xi.len() != self.dim {
            return Err(SlowFastError::Argument("vector has wrong length".into()));
        }
        if t == s {
            return Ok(xi.to_vec());
        }
        let cfg = IntegratorConfig::with_step(self.step);
        let nsteps = cfg.steps_for(t - s)?;
        let h = (t - s) / nsteps as f64;
        let mut a = DMatrix::zeros(self.dim, self.dim);
        let mut u = xi.to_vec();
        let mut w = Rk4Work::new(self.dim);
        for k in 0..nsteps {
            let tk = s + k as f64 * h;
            rk4_step(tk, h, &mut u, &mut w, |tt, x, dx| {
                self.generator_at(tt, &mut a);
                matvec(&a, x, dx);
            });
        }
        Ok(u)
    }

    /// Dense `T(t, s)`; available for `dim <= 64`.
    pub fn matrix(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        if self.dim > 64 {
            return Err(SlowFastError::Capability("dense process operators need dim <= 64".into()));
        }
        if t < s && self.kind != GeneratorKind::Z {
            return Err(SlowFastError::Order { t, s });
        }
        if t == s {
            return Ok(DMatrix::identity(self.dim, self.dim));
        }
        let d = self.dim;
        let cfg = IntegratorConfig::with_step(self.step);
        let nsteps = cfg.steps_for(t - s)?;
        let h = (t - s) / nsteps as f64;
        let mut a = DMatrix::zeros(d, d);
        let mut u: Vec<f64> = DMatrix::<f64>::identity(d, d).as_slice().to_vec();
        let mut w = Rk4Work::new(d * d);
        for k in 0..nsteps {
            let tk = s + k as f64 * h;
            rk4_step(tk, h, &mut u, &mut w, |tt, x, dx| {
                self.generator_at(tt, &mut a);
                for c in 0..d {
                    matvec(&a, &x[c * d..(c + 1) * d], &mut dx[c * d..(c + 1) * d]);
                }
            });
        }
        Ok(DMatrix::from_column_slice(d, d, &u))
    }

    /// `T(t, s)` sampled at every step from `s` up to `s + span`: returns `(tau_k, T(s + tau_k, s))`.
    pub fn matrices_from(&self, s: f64, span: f64) -> Result<Vec<(f64, DMatrix<f64>)>> {
        let d = self.dim;
        let cfg = IntegratorConfig::with_step(self.step);
        let nsteps = cfg.steps_for(span)?;
        let h = span / nsteps as f64;
        let mut a = DMatrix::zeros(d, d);
        let mut u: Vec<f64> = DMatrix::<f64>::identity(d, d).as_slice().to_vec();
        let mut w = Rk4Work::new(d * d);
        let mut out = Vec::with_capacity(nsteps + 1);
        out.push((0.0, DMatrix::identity(d, d)));
        for k in 0..nsteps {
            let tk = s + k as f64 * h;
            rk4_step(tk, h, &mut u, &mut w, |tt, x, dx| {
                self.generator_at(tt, &mut a);
                for c in 0..d {
                    matvec(&a, &x[c * d..(c + 1) * d], &mut dx[c * d..(c + 1) * d]);
                }
            });
            out.push(((k + 1) as f64 * h, DMatrix::from_column_slice(d, d, &u)));
        }
        Ok(out)
    }
}

/// `T(t, s) xi` for a process handle.
pub fn process_apply(h: &ProcessHandle, t: f64, s: f64, xi: &[f64]) -> Result<Vec<f64>> {
    h.apply(t, s, xi)
}

/// `out = a * x` for a column-major matrix.
#[inline]
pub fn matvec(a: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (r, c) = a.shape();
    let s = a.as_slice();
    out[..r].iter_mut().for_each(|v| *v = 0.0);
    for j in 0..c {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        let col = &s[j * r..(j + 1) * r];
        for i in 0..r {
            out[i] += col[i] * xj;
        }
    }
}

/// First (and optionally second) variational flow along an orbit.
#[derive(Clone, Debug)]
pub struct VariationalFlow {
    /// The recomputed base orbit.
    pub orbit: OrbitPath,
    /// `d(x, y)(t) / d(x0, y0)` per sample, `(m+n) x (m+n)`.
    pub first: Vec<DMatrix<f64>>,
    /// Second derivatives per sample: entry `[i + d*(a + d*b)]` is `d^2 u_i / du0_a du0_b`.
    pub second: Option<Vec<Vec<f64>>>,
}

/// Full Jacobian `[[F_x, F_y], [g_x, g_y]]` at `(x, y)`.
pub fn full_jacobian(sys: &dyn FastSlowSystem, x: &[f64], y: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
    let (m, n) = (sys.m(), sys.n());
    let mut fx = DMatrix::zeros(m, m);
    let mut fy = DMatrix::zeros(m, n);
    let mut gx = DMatrix::zeros(n, m);
    let mut gy = DMatrix::zeros(n, n);
    sys.jac_f(x, y, &mut fx, &mut fy)?;
    sys.jac_g(x, y, &mut gx, &mut gy)?;
    out.view_mut((0, 0), (m, m)).copy_from(&fx);
    out.view_mut((0, m), (m, n)).copy_from(&fy);
    out.view_mut((m, 0), (n, m)).copy_from(&gx);
    out.view_mut((m, m), (n, n)).copy_from(&gy);
    Ok(())
}

/// Variational equations of order 1 or 2 along the orbit starting at `base`'s first sample,
/// integrated over `base`'s time span with step `cfg.step`.
pub fn variational_flow(
    sys: &dyn FastSlowSystem,
    base: &OrbitPath,
    order: usize,
    cfg: &IntegratorConfig,
) -> Result<VariationalFlow> {
    if !(order == 1 || order == 2) {
        return Err(SlowFastError::Argument("order must be 1 or 2".into()));
    }
    if !sys.has_jacobians() {
        return Err(SlowFastError::Capability("DF/Dg".into()));
    }
    if order == 2 && !sys.has_hessians() {
        return Err(SlowFastError::Capability("D2F/D2g".into()));
    }
    let (m, n) = (sys.m(), sys.n());
    let d = m + n;
    let t0 = base.times[0];
    let t1 = *base.times.last().unwrap();
    let mut u0: Vec<f64> = base.fast_at(0).iter().chain(base.slow_at(0)).copied().collect();
    u0.extend_from_slice(DMatrix::<f64>::identity(d, d).as_slice());
    if order == 2 {
        u0.extend(std::iter::repeat(0.0).take(d * d * d));
    }
    let mut jac = DMatrix::zeros(d, d);
    let mut err: Option<SlowFastError> = None;
    let mut hv = vec![0.0; m];
    let mut hg = vec![0.0; n];
    let mut ua = vec![0.0; d];
    let mut ub = vec![0.0; d];
    let (times, vals) = integrate_track(
        &u0,
        t0,
        t1,
        cfg,
        |_, u, du| {
            let (x, rest) = u.split_at(m);
            let (y, rest) = rest.split_at(n);
            let (dxy, drest) = du.split_at_mut(d);
            sys.f(x, y, &mut dxy[..m]);
            sys.g(x, y, &mut dxy[m..]);
            if let Err(e) = full_jacobian(sys, x, y, &mut jac) {
                err = Some(e);
            }
            let (j1, j2) = rest.split_at(d * d);
            let (dj1, dj2) = drest.split_at_mut(d * d);
            for c in 0..d {
                matvec(&jac, &j1[c * d..(c + 1) * d], &mut dj1[c * d..(c + 1) * d]);
            }
            if order == 2 {
                for b in 0..d {
                    for a in 0..d {
                        let off = d * (a + d * b);
                        matvec(&jac, &j2[off..off + d], &mut dj2[off..off + d]);
                        ua.copy_from_slice(&j1[a * d..(a + 1) * d]);
                        ub.copy_from_slice(&j1[b * d..(b + 1) * d]);
                        if let Err(e) = sys.hess_f(x, y, &ua, &ub, &mut hv) {
                            err = Some(e);
                        }
                        if let Err(e) = sys.hess_g(x, y, &ua, &ub, &mut hg) {
                            err = Some(e);
                        }
                        for i in 0..m {
                            dj2[off + i] += hv[i];
                        }
                        for i in 0..n {
                            dj2[off + m + i] += hg[i];
                        }
                    }
                }
            }
        },
        |_, _| Ok(()),
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    let stride = u0.len();
    let len = times.len();
    let mut fast = Vec::with_capacity(len * m);
    let mut slow = Vec::with_capacity(len * n);
    let mut first = Vec::with_capacity(len);
    let mut second = if order == 2 { Some(Vec::with_capacity(len)) } else { None };
    for i in 0..len {
        let row = &vals[i * stride..(i + 1) * stride];
        fast.extend_from_slice(&row[..m]);
        slow.extend_from_slice(&row[m..d]);
        first.push(DMatrix::from_column_slice(d, d, &row[d..d + d * d]));
        if let Some(s) = second.as_mut() {
            s.push(row[d + d * d..].to_vec());
        }
    }
    let orbit = OrbitPath::new(times, fast, slow, m, n, cfg.step)?;
    Ok(VariationalFlow { orbit, first, second })
}

/// Truncation horizon `ln(K max(C_amp, 1) / tol) / (mu - K M1x)` with `C_amp = 2 (K M0 / mu + delta)`.
///
/// The floor on `C_amp` also keeps the Lipschitz defect `K exp(-(mu - K M1x) T)` of the
/// truncated map below `tol`.
pub fn truncation_horizon(cert: &ConstantsCertificate, tol: f64) -> Result<f64> {
    let rate = cert.mu - cert.k * cert.m1x;
    if !(rate > 0.0) {
        return Err(SlowFastError::Contraction(format!("K*M1x = {} >= mu = {}", cert.k * cert.m1x, cert.mu)));
    }
    let c_amp = 2.0 * (cert.k * cert.m0 / cert.mu + cert.delta);
    Ok(((cert.k * c_amp.max(1.0) / tol).ln() / rate).max(1.0))
}

/// Options for [`bounded_solution`].
#[derive(Clone, Debug)]
pub struct BoundedOptions {
    pub horizon: f64,
    pub policy: DomainPolicy,
}

/// Backward slow path `psi' = g(sigma(psi), psi)` from `eta` down to `-horizon`,
/// returned as an increasing-time track at step `dt`.
pub fn backward_driver(
    sys: &dyn FastSlowSystem,
    sigma: &GridFunction,
    eta: &[f64],
    horizon: f64,
    cfg: &IntegratorConfig,
    policy: DomainPolicy,
) -> Result<UniformTrack> {
    let (m, n) = (sys.m(), sys.n());
    let dom = sys.domain().clone();
    let mut sx = vec![0.0; m];
    let (times, vals) = integrate_track(
        eta,
        0.0,
        -horizon,
        cfg,
        |_, y, dy| {
            sigma.eval_clamped(y, &mut sx);
            sys.g(&sx, y, dy);
        },
        |t, y| {
            if policy == DomainPolicy::Strict && !dom.contains(y) {
                Err(SlowFastError::DomainExit { time: t })
            } else {
                Ok(())
            }
        },
    )?;
    let len = times.len();
    let mut rev = Vec::with_capacity(len * n);
    for i in (0..len).rev() {
        rev.extend_from_slice(&vals[i * n..(i + 1) * n]);
    }
    let h = if len > 1 { times[0] - times[1] } else { cfg.step };
    Ok(UniformTrack { t0: times[len - 1], h, dim: n, vals: rev })
}

/// Forward solve of `x' = F(x, psi(t))` on the driver's span from `x(t0) = x_start`.
/// Returns the samples when `keep` is set, otherwise only the endpoint.
pub fn forward_fast(
    sys: &dyn FastSlowSystem,
    driver: &UniformTrack,
    x_start: &[f64],
    keep: bool,
) -> (Vec<f64>, Vec<f64>) {
    let m = sys.m();
    let n = driver.dim;
    let len = driver.len();
    let h = driver.h;
    let mut x = x_start.to_vec();
    let mut w = Rk4Work::new(m);
    let mut y = vec![0.0; n];
    let mut path = Vec::new();
    if keep {
        path.reserve(len * m);
        path.extend_from_slice(&x);
    }
    for k in 0..len.saturating_sub(1) {
        let t = driver.t0 + k as f64 * h;
        rk4_step(t, h, &mut x, &mut w, |tt, xx, dx| {
            driver.eval(tt, &mut y);
            sys.f(xx, &y, dx);
        });
        if keep {
            path.extend_from_slice(&x);
        }
    }
    (x, path)
}

/// Bounded solution `phi(.; eta, sigma)` of `x' = F(x, psi(t))` on `[-T, 0]` by one forward
/// solve from `x(-T) = sigma(psi(-T))`.
pub fn bounded_solution(
    sys: &dyn FastSlowSystem,
    sigma: &GridFunction,
    eta: &[f64],
    cert: &ConstantsCertificate,
    opts: &BoundedOptions,
    cfg: &IntegratorConfig,
) -> Result<OrbitPath> {
    if !cert.h_ok() {
        return Err(SlowFastError::Contraction(format!(
            "K*M1x = {} >= mu = {}",
            cert.k * cert.m1x,
            cert.mu
        )));
    }
    let (m, n) = (sys.m(), sys.n());
    let driver = backward_driver(sys, sigma, eta, opts.horizon, cfg, opts.policy)?;
    let mut x0 = vec![0.0; m];
    sigma.eval_clamped(driver.row(0), &mut x0);
    let (_, fast) = forward_fast(sys, &driver, &x0, true);
    let len = driver.len();
    let times: Vec<f64> = (0..len)
        .map(|i| if i + 1 == len { 0.0 } else { driver.t0 + i as f64 * driver.h })
        .collect();
    let mut path = OrbitPath::new(times, fast, driver.vals.clone(), m, n, driver.h)?;
    path.horizon = Some(opts.horizon);
    Ok(path)
}

/// `phi(0; eta, sigma)` without storing the path.
pub fn bounded_endpoint(
    sys: &dyn FastSlowSystem,
    sigma: &GridFunction,
    eta: &[f64],
    horizon: f64,
    cfg: &IntegratorConfig,
    policy: DomainPolicy,
) -> Result<Vec<f64>> {
    let driver = backward_driver(sys, sigma, eta, horizon, cfg, policy)?;
    let mut x0 = vec![0.0; sys.m()];
    sigma.eval_clamped(driver.row(0), &mut x0);
    let (x, _) = forward_fast(sys, &driver, &x0, false);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SlowFastError::Numeric("non-finite bounded solution".into()));
    }
    Ok(x)
}

/// Picard iteration `phi <- T0(., -T) sigma(psi(-T)) + int T0(., s) R0(phi(s), psi(s)) ds`
/// over the truncated window; a cross-check for [`bounded_solution`].
pub fn bounded_solution_picard(
    sys: &dyn FastSlowSystem,
    sigma: &GridFunction,
    eta: &[f64],
    cert: &ConstantsCertificate,
    opts: &BoundedOptions,
    cfg: &IntegratorConfig,
    tol: f64,
    max_iters: usize,
) -> Result<(OrbitPath, usize)> {
    if !cert.h_ok() {
        return Err(SlowFastError::Contraction("K*M1x >= mu".into()));
    }
    let (m, n) = (sys.m(), sys.n());
    let driver = backward_driver(sys, sigma, eta, opts.horizon, cfg, opts.policy)?;
    let len = driver.len();
    let mut x0 = vec![0.0; m];
    sigma.eval_clamped(driver.row(0), &mut x0);
    let mut phi = UniformTrack { t0: driver.t0, h: driver.h, dim: m, vals: vec![0.0; len * m] };
    for i in 0..len {
        phi.vals[i * m..(i + 1) * m].copy_from_slice(&x0);
    }
    let mut a = DMatrix::zeros(m, m);
    let mut y = vec![0.0; n];
    let mut px = vec![0.0; m];
    let mut r = vec![0.0; m];
    let mut ax = vec![0.0; m];
    for it in 1..=max_iters {
        let mut x = x0.clone();
        let mut w = Rk4Work::new(m);
        let mut next = Vec::with_capacity(len * m);
        next.extend_from_slice(&x);
        for k in 0..len - 1 {
            let t = driver.t0 + k as f64 * driver.h;
            rk4_step(t, driver.h, &mut x, &mut w, |tt, xx, dx| {
                driver.eval(tt, &mut y);
                phi.eval(tt, &mut px);
                sys.a0(&y, &mut a);
                matvec(&a, xx, &mut ax);
                r0_into(sys, &px, &y, &mut r);
                for i in 0..m {
                    dx[i] = ax[i] + r[i];
                }
            });
            next.extend_from_slice(&x);
        }
        let change = next.iter().zip(&phi.vals).fold(0.0f64, |acc, (p, q)| acc.max((p - q).abs()));
        phi.vals = next;
        if change <= tol {
            let times: Vec<f64> = (0..len).map(|i| driver.t0 + i as f64 * driver.h).collect();
            let mut path = OrbitPath::new(times, phi.vals, driver.vals.clone(), m, n, driver.h)?;
            path.horizon = Some(opts.horizon);
            return Ok((path, it));
        }
    }
    Err(SlowFastError::Divergence { iters: max_iters, residual: f64::NAN })
}

/// Cumulative integrals `I_i = int_{t_i}^{t_N} f dt` on a uniform grid with a fourth-order rule.
pub fn cumulative_from_end(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    let piece = |i: usize| -> f64 {
        // Integral over [t_i, t_{i+1}].
        if n < 4 {
            return 0.5 * h * (f[i] + f[i + 1]);
        }
        if i == 0 {
            h / 24.0 * (9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3])
        } else if i + 2 >= n {
            h / 24.0 * (f[i - 2] - 5.0 * f[i - 1] + 19.0 * f[i] + 9.0 * f[i + 1])
        } else {
            h / 24.0 * (-f[i - 1] + 13.0 * f[i] + 13.0 * f[i + 1] - f[i + 2])
        }
    };
    for i in (0..n - 1).rev() {
        out[i] = out[i + 1] + piece(i);
    }
    out
}
