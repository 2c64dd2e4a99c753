//! The fast-slow system interface, epsilon families and derivative checks.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::BoxDomain;
use super::norm::Norm;
use super::orbit::{FastState, SlowState};
use crate::error::{Result, SlowFastError};

/// Step used for finite-difference derivatives.
pub const FD_STEP: f64 = 1e-6;

/// System `x' = F(x, y)`, `y' = g(x, y)` with `x` in `R^m` and `y` in `R^n`.
///
/// Hessian callables take directions `u, v` in `R^{m+n}` (fast components first)
/// and write the bilinear form `D^2 F(x, y)[u, v]`.
pub trait FastSlowSystem: Send + Sync {
    /// Display name.
    fn name(&self) -> String {
        "system".into()
    }
    /// Fast dimension.
    fn m(&self) -> usize;
    /// Slow dimension.
    fn n(&self) -> usize;
    /// Norm of the fast space.
    fn fast_norm(&self) -> &Norm;
    /// The closed slow box.
    fn domain(&self) -> &BoxDomain;
    /// Whether `g` vanishes on the boundary of the slow box.
    fn boundary_flag(&self) -> bool {
        false
    }
    /// `F(x, y)`.
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// `g(x, y)`.
    fn g(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// `A0(y) = D_x F(0, y)`.
    fn a0(&self, y: &[f64], out: &mut DMatrix<f64>);
    /// Whether `jac_f` and `jac_g` are supplied.
    fn has_jacobians(&self) -> bool {
        false
    }
    /// Whether `hess_f` and `hess_g` are supplied.
    fn has_hessians(&self) -> bool {
        false
    }
    /// `D_x F` (m x m) and `D_y F` (m x n).
    fn jac_f(&self, _x: &[f64], _y: &[f64], _dx: &mut DMatrix<f64>, _dy: &mut DMatrix<f64>) -> Result<()> {
        Err(SlowFastError::Capability("DF".into()))
    }
    /// `D_x g` (n x m) and `D_y g` (n x n).
    fn jac_g(&self, _x: &[f64], _y: &[f64], _dx: &mut DMatrix<f64>, _dy: &mut DMatrix<f64>) -> Result<()> {
        Err(SlowFastError::Capability("Dg".into()))
    }
    /// `D^2 F(x, y)[u, v]`.
    fn hess_f(&self, _x: &[f64], _y: &[f64], _u: &[f64], _v: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(SlowFastError::Capability("D2F".into()))
    }
    /// `D^2 g(x, y)[u, v]`.
    fn hess_g(&self, _x: &[f64], _y: &[f64], _u: &[f64], _v: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(SlowFastError::Capability("D2g".into()))
    }
}

/// Shared, thread-safe system handle.
pub type SystemRef = Arc<dyn FastSlowSystem>;

/// A system depending on a parameter `eps` that can be frozen or promoted to a slow variable.
pub trait EpsilonFamily: Send + Sync {
    fn name(&self) -> String;
    fn m(&self) -> usize;
    fn n(&self) -> usize;
    fn fast_norm(&self) -> &Norm;
    fn domain(&self) -> &BoxDomain;
    fn boundary_flag(&self) -> bool {
        false
    }
    fn f(&self, x: &[f64], y: &[f64], eps: f64, out: &mut [f64]);
    fn g(&self, x: &[f64], y: &[f64], eps: f64, out: &mut [f64]);
    fn a0(&self, y: &[f64], eps: f64, out: &mut DMatrix<f64>);
    fn has_jacobians(&self) -> bool {
        false
    }
    fn has_hessians(&self) -> bool {
        false
    }
    fn jac_f(&self, _x: &[f64], _y: &[f64], _eps: f64, _dx: &mut DMatrix<f64>, _dy: &mut DMatrix<f64>) -> Result<()> {
        Err(SlowFastError::Capability("DF".into()))
    }
    fn jac_g(&self, _x: &[f64], _y: &[f64], _eps: f64, _dx: &mut DMatrix<f64>, _dy: &mut DMatrix<f64>) -> Result<()> {
        Err(SlowFastError::Capability("Dg".into()))
    }
    fn hess_f(&self, _x: &[f64], _y: &[f64], _eps: f64, _u: &[f64], _v: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(SlowFastError::Capability("D2F".into()))
    }
    fn hess_g(&self, _x: &[f64], _y: &[f64], _eps: f64, _u: &[f64], _v: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(SlowFastError::Capability("D2g".into()))
    }
}

/// A family member at fixed `eps`.
pub struct AtEpsilon<Fam: ?Sized> {
    pub family: Arc<Fam>,
    pub eps: f64,
}

impl<Fam: EpsilonFamily + ?Sized> AtEpsilon<Fam> {
    pub fn new(family: Arc<Fam>, eps: f64) -> Self {
        Self { family, eps }
    }
}

impl<Fam: EpsilonFamily + ?Sized> FastSlowSystem for AtEpsilon<Fam> {
    fn name(&self) -> String {
        format!("{}(eps={})", self.family.name(), self.eps)
    }
    fn m(&self) -> usize {
        self.family.m()
    }
    fn n(&self) -> usize {
        self.family.n()
    }
    fn fast_norm(&self) -> &Norm {
        self.family.fast_norm()
    }
    fn domain(&self) -> &BoxDomain {
        self.family.domain()
    }
    fn boundary_flag(&self) -> bool {
        self.family.boundary_flag()
    }
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.family.f(x, y, self.eps, out)
    }
    fn g(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.family.g(x, y, self.eps, out)
    }
    fn a0(&self, y: &[f64], out: &mut DMatrix<f64>) {
        self.family.a0(y, self.eps, out)
    }
    fn has_jacobians(&self) -> bool {
        self.family.has_jacobians()
    }
    fn has_hessians(&self) -> bool {
        self.family.has_hessians()
    }
    fn jac_f(&self, x: &[f64], y: &[f64], dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        self.family.jac_f(x, y, self.eps, dx, dy)
    }
    fn jac_g(&self, x: &[f64], y: &[f64], dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        self.family.jac_g(x, y, self.eps, dx, dy)
    }
    fn hess_f(&self, x: &[f64], y: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        self.family.hess_f(x, y, self.eps, u, v, out)
    }
    fn hess_g(&self, x: &[f64], y: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        self.family.hess_g(x, y, self.eps, u, v, out)
    }
}

/// Family with `eps` appended as a last slow coordinate of zero drift.
///
/// The `eps`-columns of the slow Jacobians are central finite differences.
pub struct Augmented<Fam: ?Sized> {
    family: Arc<Fam>,
    domain: BoxDomain,
}

impl<Fam: EpsilonFamily + ?Sized> Augmented<Fam> {
    fn split<'a>(&self, y: &'a [f64]) -> (&'a [f64], f64) {
        let n = self.family.n();
        (&y[..n], y[n])
    }
}

/// Promotes `eps` to a slow variable on `eps_range`.
pub fn augment_epsilon<Fam: EpsilonFamily + ?Sized + 'static>(
    family: Arc<Fam>,
    eps_range: (f64, f64),
) -> Result<Augmented<Fam>> {
    if !(eps_range.0 < eps_range.1) {
        return Err(SlowFastError::Argument("empty eps range".into()));
    }
    let base = family.domain();
    let mut lower = base.lower.clone();
    let mut upper = base.upper.clone();
    lower.push(eps_range.0);
    upper.push(eps_range.1);
    let domain = BoxDomain::new(lower, upper)?;
    Ok(Augmented { family, domain })
}

impl<Fam: EpsilonFamily + ?Sized> FastSlowSystem for Augmented<Fam> {
    fn name(&self) -> String {
        format!("{}+eps", self.family.name())
    }
    fn m(&self) -> usize {
        self.family.m()
    }
    fn n(&self) -> usize {
        self.family.n() + 1
    }
    fn fast_norm(&self) -> &Norm {
        self.family.fast_norm()
    }
    fn domain(&self) -> &BoxDomain {
        &self.domain
    }
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let (ys, e) = self.split(y);
        self.family.f(x, ys, e, out)
    }
    fn g(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let (ys, e) = self.split(y);
        let n = self.family.n();
        self.family.g(x, ys, e, &mut out[..n]);
        out[n] = 0.0;
    }
    fn a0(&self, y: &[f64], out: &mut DMatrix<f64>) {
        let (ys, e) = self.split(y);
        self.family.a0(ys, e, out)
    }
    fn has_jacobians(&self) -> bool {
        self.family.has_jacobians()
    }
    fn jac_f(&self, x: &[f64], y: &[f64], dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        let (ys, e) = self.split(y);
        let (m, n) = (self.family.m(), self.family.n());
        let mut dyb = DMatrix::zeros(m, n);
        self.family.jac_f(x, ys, e, dx, &mut dyb)?;
        let mut fp = vec![0.0; m];
        let mut fm = vec![0.0; m];
        self.family.f(x, ys, e + FD_STEP, &mut fp);
        self.family.f(x, ys, e - FD_STEP, &mut fm);
        for i in 0..m {
            for j in 0..n {
                dy[(i, j)] = dyb[(i, j)];
            }
            dy[(i, n)] = (fp[i] - fm[i]) / (2.0 * FD_STEP);
        }
        Ok(())
    }
    fn jac_g(&self, x: &[f64], y: &[f64], dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        let (ys, e) = self.split(y);
        let (m, n) = (self.family.m(), self.family.n());
        let mut dxb = DMatrix::zeros(n, m);
        let mut dyb = DMatrix::zeros(n, n);
        self.family.jac_g(x, ys, e, &mut dxb, &mut dyb)?;
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        self.family.g(x, ys, e + FD_STEP, &mut gp);
        self.family.g(x, ys, e - FD_STEP, &mut gm);
        dx.fill(0.0);
        dy.fill(0.0);
        for i in 0..n {
            for j in 0..m {
                dx[(i, j)] = dxb[(i, j)];
            }
            for j in 0..n {
                dy[(i, j)] = dyb[(i, j)];
            }
            dy[(i, n)] = (gp[i] - gm[i]) / (2.0 * FD_STEP);
        }
        Ok(())
    }
}

/// `R0(x, y) = F(x, y) - A0(y) x`, rejecting `y` outside the slow box.
pub fn eval_r0(sys: &dyn FastSlowSystem, x: &FastState, y: &SlowState) -> Result<FastState> {
    sys.domain().check(y.coords())?;
    let mut out = vec![0.0; sys.m()];
    r0_into(sys, &x.coords, y.coords(), &mut out);
    Ok(FastState::new(out, sys.fast_norm().clone()))
}

/// Unchecked `R0` into a buffer.
pub fn r0_into(sys: &dyn FastSlowSystem, x: &[f64], y: &[f64], out: &mut [f64]) {
    let m = sys.m();
    sys.f(x, y, out);
    let mut a = DMatrix::zeros(m, m);
    sys.a0(y, &mut a);
    for i in 0..m {
        let mut s = 0.0;
        for j in 0..m {
            s += a[(i, j)] * x[j];
        }
        out[i] -= s;
    }
}

/// Central finite-difference Jacobians of `F` and `g`.
pub fn fd_jacobians(
    sys: &dyn FastSlowSystem,
    x: &[f64],
    y: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (m, n) = (sys.m(), sys.n());
    let mut fx = DMatrix::zeros(m, m);
    let mut fy = DMatrix::zeros(m, n);
    let mut gx = DMatrix::zeros(n, m);
    let mut gy = DMatrix::zeros(n, n);
    let mut fp = vec![0.0; m];
    let mut fm = vec![0.0; m];
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let mut xp = x.to_vec();
    for j in 0..m {
        let h = FD_STEP * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        sys.f(&xp, y, &mut fp);
        sys.g(&xp, y, &mut gp);
        xp[j] = x[j] - h;
        sys.f(&xp, y, &mut fm);
        sys.g(&xp, y, &mut gm);
        xp[j] = x[j];
        for i in 0..m {
            fx[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
        for i in 0..n {
            gx[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let mut yp = y.to_vec();
    for j in 0..n {
        let h = FD_STEP * (1.0 + y[j].abs());
        yp[j] = y[j] + h;
        sys.f(x, &yp, &mut fp);
        sys.g(x, &yp, &mut gp);
        yp[j] = y[j] - h;
        sys.f(x, &yp, &mut fm);
        sys.g(x, &yp, &mut gm);
        yp[j] = y[j];
        for i in 0..m {
            fy[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
        for i in 0..n {
            gy[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    (fx, fy, gx, gy)
}

/// Worst relative discrepancies found by [`check_derivatives`].
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct DerivativeCheck {
    pub jac_f: f64,
    pub jac_g: f64,
    pub a0: f64,
    pub hess_f: Option<f64>,
    pub hess_g: Option<f64>,
}

impl DerivativeCheck {
    /// Largest discrepancy over all checked objects.
    pub fn worst(&self) -> f64 {
        [self.jac_f, self.jac_g, self.a0, self.hess_f.unwrap_or(0.0), self.hess_g.unwrap_or(0.0)]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(1.0);
    (a - b).amax() / scale
}

/// Compares supplied derivatives with central differences at random points
/// (`y` uniform in the box, `x` uniform in `[-x_radius, x_radius]^m`).
pub fn check_derivatives(sys: &dyn FastSlowSystem, samples: usize, x_radius: f64, seed: u64) -> Result<DerivativeCheck> {
    let (m, n) = (sys.m(), sys.n());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = sys.domain().clone();
    let mut out = DerivativeCheck::default();
    let mut fx = DMatrix::zeros(m, m);
    let mut fy = DMatrix::zeros(m, n);
    let mut gx = DMatrix::zeros(n, m);
    let mut gy = DMatrix::zeros(n, n);
    let mut a = DMatrix::zeros(m, m);
    let mut hmax_f: Option<f64> = None;
    let mut hmax_g: Option<f64> = None;
    for _ in 0..samples {
        let y: Vec<f64> = (0..n).map(|k| rng.gen_range(dom.lower[k]..=dom.upper[k])).collect();
        let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-x_radius..=x_radius)).collect();
        let (nfx, nfy, ngx, ngy) = fd_jacobians(sys, &x, &y);
        // A0 against D_x F at x = 0.
        sys.a0(&y, &mut a);
        let zero = vec![0.0; m];
        let (f0x, _, _, _) = fd_jacobians(sys, &zero, &y);
        out.a0 = out.a0.max(rel_err(&a, &f0x));
        if sys.has_jacobians() {
            sys.jac_f(&x, &y, &mut fx, &mut fy)?;
            sys.jac_g(&x, &y, &mut gx, &mut gy)?;
            out.jac_f = out.jac_f.max(rel_err(&fx, &nfx)).max(rel_err(&fy, &nfy));
            out.jac_g = out.jac_g.max(rel_err(&gx, &ngx)).max(rel_err(&gy, &ngy));
        }
        if sys.has_hessians() && sys.has_jacobians() {
            let u: Vec<f64> = (0..m + n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let v: Vec<f64> = (0..m + n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let (ef, eg) = hessian_discrepancy(sys, &x, &y, &u, &v)?;
            hmax_f = Some(hmax_f.unwrap_or(0.0).max(ef));
            hmax_g = Some(hmax_g.unwrap_or(0.0).max(eg));
        }
    }
    out.hess_f = hmax_f;
    out.hess_g = hmax_g;
    Ok(out)
}

/// Relative error of `D^2F[u,v]`, `D^2g[u,v]` against differences of the Jacobians along `u`.
fn hessian_discrepancy(sys: &dyn FastSlowSystem, x: &[f64], y: &[f64], u: &[f64], v: &[f64]) -> Result<(f64, f64)> {
    let (m, n) = (sys.m(), sys.n());
    let h = 1e-5;
    let shift = |s: f64| -> (Vec<f64>, Vec<f64>) {
        (
            (0..m).map(|i| x[i] + s * u[i]).collect(),
            (0..n).map(|i| y[i] + s * u[m + i]).collect(),
        )
    };
    let apply = |xs: &[f64], ys: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut fx = DMatrix::zeros(m, m);
        let mut fy = DMatrix::zeros(m, n);
        let mut gx = DMatrix::zeros(n, m);
        let mut gy = DMatrix::zeros(n, n);
        sys.jac_f(xs, ys, &mut fx, &mut fy)?;
        sys.jac_g(xs, ys, &mut gx, &mut gy)?;
        let vx = nalgebra::DVector::from_column_slice(&v[..m]);
        let vy = nalgebra::DVector::from_column_slice(&v[m..]);
        let fv = &fx * &vx + &fy * &vy;
        let gv = &gx * &vx + &gy * &vy;
        Ok((fv.as_slice().to_vec(), gv.as_slice().to_vec()))
    };
    let (xp, yp) = shift(h);
    let (xm, ym) = shift(-h);
    let (fp, gp) = apply(&xp, &yp)?;
    let (fm, gm) = apply(&xm, &ym)?;
    let mut hf = vec![0.0; m];
    let mut hg = vec![0.0; n];
    sys.hess_f(x, y, u, v, &mut hf)?;
    sys.hess_g(x, y, u, v, &mut hg)?;
    let ef = (0..m).fold(0.0f64, |a, i| a.max((hf[i] - (fp[i] - fm[i]) / (2.0 * h)).abs()));
    let eg = (0..n).fold(0.0f64, |a, i| a.max((hg[i] - (gp[i] - gm[i]) / (2.0 * h)).abs()));
    let sf = hf.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let sg = hg.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    Ok((ef / sf, eg / sg))
}
