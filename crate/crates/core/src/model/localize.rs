//! Shift to a critical-manifold sheet and cut the nonlinearity off outside a tube.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::cutoff::CutoffSpec;
use super::grid::{BoxDomain, GridDomain, GridFunction};
use super::norm::Norm;
use super::system::{fd_jacobians, FastSlowSystem, SystemRef, FD_STEP};
use crate::error::{Result, SlowFastError};

/// A graph `x = h0(y)` with its Jacobian.
pub trait Sheet: Send + Sync {
    fn m(&self) -> usize;
    fn n(&self) -> usize;
    fn value(&self, y: &[f64], out: &mut [f64]);
    /// `D h0(y)`, shape `m x n`.
    fn jacobian(&self, y: &[f64], out: &mut DMatrix<f64>);
}

impl Sheet for GridFunction {
    fn m(&self) -> usize {
        self.dim
    }
    fn n(&self) -> usize {
        self.domain.dim()
    }
    fn value(&self, y: &[f64], out: &mut [f64]) {
        self.eval_clamped(y, out)
    }
    fn jacobian(&self, y: &[f64], out: &mut DMatrix<f64>) {
        let mut col = vec![0.0; self.dim];
        for k in 0..self.domain.dim() {
            self.partial(y, k, &mut col);
            for i in 0..self.dim {
                out[(i, k)] = col[i];
            }
        }
    }
}

type ValueFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type JacFn = dyn Fn(&[f64], &mut DMatrix<f64>) + Send + Sync;

/// Sheet given by closures.
pub struct AnalyticSheet {
    pub m: usize,
    pub n: usize,
    pub value: Box<ValueFn>,
    pub jacobian: Box<JacFn>,
}

impl Sheet for AnalyticSheet {
    fn m(&self) -> usize {
        self.m
    }
    fn n(&self) -> usize {
        self.n
    }
    fn value(&self, y: &[f64], out: &mut [f64]) {
        (self.value)(y, out)
    }
    fn jacobian(&self, y: &[f64], out: &mut DMatrix<f64>) {
        (self.jacobian)(y, out)
    }
}

/// The zero sheet `h0 = 0`.
pub struct ZeroSheet {
    pub m: usize,
    pub n: usize,
}

impl Sheet for ZeroSheet {
    fn m(&self) -> usize {
        self.m
    }
    fn n(&self) -> usize {
        self.n
    }
    fn value(&self, _y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0)
    }
    fn jacobian(&self, _y: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0)
    }
}

/// System in `xt = x - h0(y)` with the nonlinearity multiplied by `chi(|xt| / radius)`.
///
/// `F_loc = A(y) xt + r0(y) + chi * (F(xt + h0, y) - Dh0 g(xt + h0, y) - A(y) xt - r0(y))`
/// with `r0(y) = F(h0, y) - Dh0 g(h0, y)`,
/// `g_loc = g(chi * xt + h0, y)`, where `A(y) = D_xF(h0, y) - Dh0 D_xg(h0, y)`.
/// The cutoff argument uses the Euclidean length of `xt`.
pub struct Localized {
    base: SystemRef,
    sheet: Arc<dyn Sheet>,
    radius: f64,
    bump: CutoffSpec,
    name: String,
}

/// Builds the localized system after checking `|F(h0(y), y)| <= tol` on the grid nodes.
pub fn localize(
    sys: SystemRef,
    sheet: Arc<dyn Sheet>,
    nodes: &GridDomain,
    radius: f64,
    bump: CutoffSpec,
    tol: f64,
) -> Result<Localized> {
    if !(radius > 0.0) {
        return Err(SlowFastError::Argument("cutoff radius must be positive".into()));
    }
    if sheet.m() != sys.m() || sheet.n() != sys.n() {
        return Err(SlowFastError::Argument("sheet dimensions do not match system".into()));
    }
    let m = sys.m();
    let mut h = vec![0.0; m];
    let mut f = vec![0.0; m];
    for y in nodes.nodes() {
        sheet.value(&y, &mut h);
        sys.f(&h, &y, &mut f);
        let r = sys.fast_norm().norm(&f);
        if !(r <= tol) {
            return Err(SlowFastError::Precondition(format!(
                "sheet residual {r:e} exceeds {tol:e} at y = {y:?}"
            )));
        }
    }
    Ok(Localized { name: format!("{}-loc", sys.name()), base: sys, sheet, radius, bump })
}

struct Jac {
    fx: DMatrix<f64>,
    fy: DMatrix<f64>,
    gx: DMatrix<f64>,
    gy: DMatrix<f64>,
}

impl Localized {
    fn base_jac(&self, x: &[f64], y: &[f64]) -> Jac {
        let (m, n) = (self.base.m(), self.base.n());
        if self.base.has_jacobians() {
            let mut j = Jac {
                fx: DMatrix::zeros(m, m),
                fy: DMatrix::zeros(m, n),
                gx: DMatrix::zeros(n, m),
                gy: DMatrix::zeros(n, n),
            };
            if self.base.jac_f(x, y, &mut j.fx, &mut j.fy).is_ok()
                && self.base.jac_g(x, y, &mut j.gx, &mut j.gy).is_ok()
            {
                return j;
            }
        }
        let (fx, fy, gx, gy) = fd_jacobians(self.base.as_ref(), x, y);
        Jac { fx, fy, gx, gy }
    }

    fn sheet_at(&self, y: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let (m, n) = (self.base.m(), self.base.n());
        let mut h = vec![0.0; m];
        let mut dh = DMatrix::zeros(m, n);
        self.sheet.value(y, &mut h);
        self.sheet.jacobian(y, &mut dh);
        (h, dh)
    }

    /// `A(y) = D_xF(h0, y) - Dh0 D_xg(h0, y)`.
    fn a_loc(&self, y: &[f64]) -> DMatrix<f64> {
        let (h, dh) = self.sheet_at(y);
        let j = self.base_jac(&h, y);
        &j.fx - &dh * &j.gx
    }

    /// `r0(y) = F(h0, y) - Dh0 g(h0, y)`.
    fn r0_loc(&self, y: &[f64]) -> DVector<f64> {
        let (m, n) = (self.base.m(), self.base.n());
        let (h, dh) = self.sheet_at(y);
        let mut fv = vec![0.0; m];
        let mut gv = vec![0.0; n];
        self.base.f(&h, y, &mut fv);
        self.base.g(&h, y, &mut gv);
        DVector::from_column_slice(&fv) - dh * DVector::from_column_slice(&gv)
    }

    /// `chi(|xt|/r)` and its gradient in `xt`.
    fn cut(&self, xt: &[f64]) -> (f64, DVector<f64>) {
        let len = Norm::Euclidean.norm(xt);
        let (c, c1, _) = self.bump.eval(len / self.radius);
        let mut grad = DVector::zeros(xt.len());
        if c1 != 0.0 && len > 0.0 {
            for (g, v) in grad.iter_mut().zip(xt) {
                *g = c1 / self.radius * v / len;
            }
        }
        (c, grad)
    }

    /// The cutoff radius.
    pub fn radius(&self) -> f64 {
        self.radius
    }
}

impl FastSlowSystem for Localized {
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
    fn boundary_flag(&self) -> bool {
        self.base.boundary_flag()
    }
    fn f(&self, xt: &[f64], y: &[f64], out: &mut [f64]) {
        let (m, n) = (self.m(), self.n());
        let (h, dh) = self.sheet_at(y);
        let x: Vec<f64> = xt.iter().zip(&h).map(|(a, b)| a + b).collect();
        let mut fv = vec![0.0; m];
        let mut gv = vec![0.0; n];
        self.base.f(&x, y, &mut fv);
        self.base.g(&x, y, &mut gv);
        let a = self.a_loc(y);
        let xtv = DVector::from_column_slice(xt);
        let ax = &a * &xtv;
        let dg = &dh * DVector::from_column_slice(&gv);
        let r0 = self.r0_loc(y);
        let (c, _) = self.cut(xt);
        for i in 0..m {
            let nl = fv[i] - dg[i] - ax[i] - r0[i];
            out[i] = ax[i] + r0[i] + c * nl;
        }
    }
    fn g(&self, xt: &[f64], y: &[f64], out: &mut [f64]) {
        let (h, _) = self.sheet_at(y);
        let (c, _) = self.cut(xt);
        let x: Vec<f64> = xt.iter().zip(&h).map(|(a, b)| c * a + b).collect();
        self.base.g(&x, y, out)
    }
    fn a0(&self, y: &[f64], out: &mut DMatrix<f64>) {
        out.copy_from(&self.a_loc(y));
    }
    fn has_jacobians(&self) -> bool {
        true
    }
    fn jac_f(&self, xt: &[f64], y: &[f64], dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        let (m, n) = (self.m(), self.n());
        let (h, dh) = self.sheet_at(y);
        let x: Vec<f64> = xt.iter().zip(&h).map(|(a, b)| a + b).collect();
        let j = self.base_jac(&x, y);
        let mut fv = vec![0.0; m];
        let mut gv = vec![0.0; n];
        self.base.f(&x, y, &mut fv);
        self.base.g(&x, y, &mut gv);
        let a = self.a_loc(y);
        let xtv = DVector::from_column_slice(xt);
        let ax = &a * &xtv;
        let gvec = DVector::from_column_slice(&gv);
        let nl = DVector::from_column_slice(&fv) - &dh * &gvec - &ax - self.r0_loc(y);
        let (c, grad) = self.cut(xt);
        let nx = &j.fx - &dh * &j.gx - &a;
        dx.copy_from(&(&a + c * nx + &nl * grad.transpose()));
        // y-derivatives of A(y), r0 and Dh0 by central differences.
        let mut yp = y.to_vec();
        for k in 0..n {
            let step = FD_STEP * (1.0 + y[k].abs());
            yp[k] = y[k] + step;
            let ap = self.a_loc(&yp);
            let (_, dhp) = self.sheet_at(&yp);
            let rp = self.r0_loc(&yp);
            yp[k] = y[k] - step;
            let am = self.a_loc(&yp);
            let (_, dhm) = self.sheet_at(&yp);
            let rm = self.r0_loc(&yp);
            yp[k] = y[k];
            let da = (ap - am) / (2.0 * step);
            let ddh = (dhp - dhm) / (2.0 * step);
            let da_x = &da * &xtv + (rp - rm) / (2.0 * step);
            let ddh_g = &ddh * &gvec;
            let inner = &j.fx * dh.column(k) + j.fy.column(k) - ddh_g
                - &dh * (&j.gx * dh.column(k) + j.gy.column(k));
            for i in 0..m {
                dy[(i, k)] = (1.0 - c) * da_x[i] + c * inner[i];
            }
        }
        Ok(())
    }
    fn jac_g(&self, xt: &[f64], y: &[f64], dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        let m = self.m();
        let (h, dh) = self.sheet_at(y);
        let (c, grad) = self.cut(xt);
        let xc: Vec<f64> = xt.iter().zip(&h).map(|(a, b)| c * a + b).collect();
        let j = self.base_jac(&xc, y);
        let xtv = DVector::from_column_slice(xt);
        let inner = DMatrix::identity(m, m) * c + &xtv * grad.transpose();
        dx.copy_from(&(&j.gx * inner));
        dy.copy_from(&(&j.gx * &dh + &j.gy));
        Ok(())
    }
}
