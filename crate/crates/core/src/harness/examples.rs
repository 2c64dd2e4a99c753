//! Built-in example systems with analytic oracles, and the planar generator families used
//! to test uniform process bounds.

use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlowFastError};
use crate::integrate::{Driver, GeneratorKind, ProcessHandle};
use crate::model::{
    localize, AnalyticSheet, AtEpsilon, BoxDomain, CutoffSpec, EpsilonFamily, GridDomain, Norm, Sheet, SystemRef,
};

/// Identifier of a built-in example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExampleId {
    /// `x' = -x + y`, `y' = eps`.
    L1,
    /// `x' = -x + y^2`, `y' = eps`.
    Q1,
    /// `x' = -x`, `y' = eps x`.
    L2,
    /// Van der Pol attracting branch `x > 1` shifted and cut off.
    #[serde(rename = "VDP-cut")]
    VdpCut,
    /// Quadrature-discretized neural field.
    NF1,
}

impl FromStr for ExampleId {
    type Err = SlowFastError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L1" => Ok(Self::L1),
            "Q1" => Ok(Self::Q1),
            "L2" => Ok(Self::L2),
            "VDP-CUT" | "VDP" | "VDPCUT" => Ok(Self::VdpCut),
            "NF1" => Ok(Self::NF1),
            _ => Err(SlowFastError::Argument(format!("unknown system '{s}'"))),
        }
    }
}

impl std::fmt::Display for ExampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::L1 => "L1",
            Self::Q1 => "Q1",
            Self::L2 => "L2",
            Self::VdpCut => "VDP-cut",
            Self::NF1 => "NF1",
        })
    }
}

/// Example parameters; unset fields take per-example defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExampleParams {
    /// Slow box.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// NF1 quadrature nodes.
    pub m: usize,
    /// NF1 coupling strength `c`.
    pub coupling: f64,
    /// NF1 kernel length scale.
    pub length: f64,
    /// VDP-cut tube radius.
    pub radius: f64,
    /// VDP-cut slow parameter `a` in `y' = eps (a - x)`.
    pub a: f64,
}

impl Default for ExampleParams {
    fn default() -> Self {
        Self { lower: vec![], upper: vec![], m: 64, coupling: 1.0, length: 0.1, radius: 0.05, a: 0.0 }
    }
}

impl ExampleParams {
    /// Defaults for `id`, with an empty box replaced by the example's standard box.
    pub fn for_example(id: ExampleId) -> Self {
        let mut p = Self::default();
        p.fill_box(id);
        p
    }

    fn fill_box(&mut self, id: ExampleId) {
        if self.lower.is_empty() || self.upper.is_empty() {
            let (lo, hi) = match id {
                ExampleId::L1 => (-0.5, 0.5),
                ExampleId::Q1 => (-1.0, 1.0),
                ExampleId::L2 => (-1.0, 1.0),
                ExampleId::VdpCut => (0.0, 2.0),
                ExampleId::NF1 => (0.5, 1.5),
            };
            self.lower = vec![lo];
            self.upper = vec![hi];
        }
    }
}

/// Scalar examples L1, Q1, L2.
pub struct ScalarExample {
    id: ExampleId,
    domain: BoxDomain,
    norm: Norm,
}

impl ScalarExample {
    pub fn new(id: ExampleId, domain: BoxDomain) -> Result<Self> {
        if !matches!(id, ExampleId::L1 | ExampleId::Q1 | ExampleId::L2) || domain.dim() != 1 {
            return Err(SlowFastError::Argument(format!("{id} is not a scalar example on an interval")));
        }
        Ok(Self { id, domain, norm: Norm::Euclidean })
    }
}

impl EpsilonFamily for ScalarExample {
    fn name(&self) -> String {
        self.id.to_string()
    }
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
    fn f(&self, x: &[f64], y: &[f64], _eps: f64, out: &mut [f64]) {
        out[0] = match self.id {
            ExampleId::L1 => -x[0] + y[0],
            ExampleId::Q1 => -x[0] + y[0] * y[0],
            _ => -x[0],
        }
    }
    fn g(&self, x: &[f64], _y: &[f64], eps: f64, out: &mut [f64]) {
        out[0] = match self.id {
            ExampleId::L2 => eps * x[0],
            _ => eps,
        }
    }
    fn a0(&self, _y: &[f64], _eps: f64, out: &mut DMatrix<f64>) {
        out[(0, 0)] = -1.0;
    }
    fn has_jacobians(&self) -> bool {
        true
    }
    fn has_hessians(&self) -> bool {
        true
    }
    fn jac_f(&self, _x: &[f64], y: &[f64], _eps: f64, dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        dx[(0, 0)] = -1.0;
        dy[(0, 0)] = match self.id {
            ExampleId::L1 => 1.0,
            ExampleId::Q1 => 2.0 * y[0],
            _ => 0.0,
        };
        Ok(())
    }
    fn jac_g(&self, _x: &[f64], _y: &[f64], eps: f64, dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        dx[(0, 0)] = if self.id == ExampleId::L2 { eps } else { 0.0 };
        dy[(0, 0)] = 0.0;
        Ok(())
    }
    fn hess_f(&self, _x: &[f64], _y: &[f64], _eps: f64, u: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = if self.id == ExampleId::Q1 { 2.0 * u[1] * v[1] } else { 0.0 };
        Ok(())
    }
    fn hess_g(&self, _x: &[f64], _y: &[f64], _eps: f64, _u: &[f64], _v: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = 0.0;
        Ok(())
    }
}

/// Van der Pol family `x' = y - x^3/3 + x`, `y' = eps (a - x)`.
pub struct VdpFamily {
    domain: BoxDomain,
    norm: Norm,
    a: f64,
}

impl VdpFamily {
    pub fn new(domain: BoxDomain, a: f64) -> Self {
        Self { domain, norm: Norm::Euclidean, a }
    }
}

impl EpsilonFamily for VdpFamily {
    fn name(&self) -> String {
        "VDP".into()
    }
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
    fn f(&self, x: &[f64], y: &[f64], _eps: f64, out: &mut [f64]) {
        out[0] = y[0] - x[0].powi(3) / 3.0 + x[0];
    }
    fn g(&self, x: &[f64], _y: &[f64], eps: f64, out: &mut [f64]) {
        out[0] = eps * (self.a - x[0]);
    }
    fn a0(&self, _y: &[f64], _eps: f64, out: &mut DMatrix<f64>) {
        out[(0, 0)] = 1.0;
    }
    fn has_jacobians(&self) -> bool {
        true
    }
    fn jac_f(&self, x: &[f64], _y: &[f64], _eps: f64, dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        dx[(0, 0)] = 1.0 - x[0] * x[0];
        dy[(0, 0)] = 1.0;
        Ok(())
    }
    fn jac_g(&self, _x: &[f64], _y: &[f64], eps: f64, dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        dx[(0, 0)] = -eps;
        dy[(0, 0)] = 0.0;
        Ok(())
    }
}

/// Attracting branch `x > 1` of `y = x^3/3 - x`, by Newton from `x = 2`.
pub fn vdp_branch(y: f64) -> f64 {
    let mut x = 2.0f64.max(1.0 + y.abs());
    for _ in 0..60 {
        let f = x * x * x / 3.0 - x - y;
        let d = x * x - 1.0;
        let dx = f / d;
        x -= dx;
        if dx.abs() < 1e-15 * x.abs() {
            break;
        }
    }
    x
}

/// The VDP sheet `h0(y) = vdp_branch(y)` with `Dh0 = 1 / (h0^2 - 1)`.
pub fn vdp_sheet() -> AnalyticSheet {
    AnalyticSheet {
        m: 1,
        n: 1,
        value: Box::new(|y, out| out[0] = vdp_branch(y[0])),
        jacobian: Box::new(|y, out| {
            let h = vdp_branch(y[0]);
            out[(0, 0)] = 1.0 / (h * h - 1.0);
        }),
    }
}

/// Smooth saturating response `s(u) = u + chi(|u|/4) (tanh u - u)`: `tanh` for `|u| <= 2`,
/// linear for `|u| >= 4`; returns `(s, s', s'')`.
pub fn nf1_response(u: f64) -> (f64, f64, f64) {
    let bump = CutoffSpec::default();
    let (c, c1, c2) = bump.eval(u.abs() / 4.0);
    let sgn = if u < 0.0 { -1.0 } else { 1.0 };
    let cu = c1 * sgn / 4.0;
    let cuu = c2 / 16.0;
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    let q = t - u;
    let q1 = -t * t;
    let q2 = -2.0 * t * sech2;
    (u + c * q, 1.0 + cu * q + c * q1, cuu * q + 2.0 * cu * q1 + c * q2)
}

/// Neural field `u_i' = -u_i + y sum_j w_ij omega_j s(u_j) + cos(pi xi_i)`, `y' = eps` on
/// nodes `xi_i = i/(m-1)` with trapezoid weights and the inhibitory kernel
/// `w_ij = -c exp(-|xi_i - xi_j| / l)`.
pub struct Nf1Family {
    m: usize,
    domain: BoxDomain,
    norm: Norm,
    /// `B = w diag(omega)`, column-major.
    b: DMatrix<f64>,
    input: Vec<f64>,
}

impl Nf1Family {
    pub fn new(m: usize, coupling: f64, length: f64, domain: BoxDomain) -> Result<Self> {
        if m < 3 || domain.dim() != 1 || !(length > 0.0) {
            return Err(SlowFastError::Argument("NF1 needs m >= 3, a 1-d slow box and l > 0".into()));
        }
        let xi: Vec<f64> = (0..m).map(|i| i as f64 / (m - 1) as f64).collect();
        let h = 1.0 / (m - 1) as f64;
        let b = DMatrix::from_fn(m, m, |i, j| {
            let w = if j == 0 || j == m - 1 { 0.5 * h } else { h };
            -coupling * (-(xi[i] - xi[j]).abs() / length).exp() * w
        });
        let input = xi.iter().map(|x| (PI * x).cos()).collect();
        Ok(Self { m, domain, norm: Norm::Sup, b, input })
    }

    /// Quadrature nodes.
    pub fn nodes(&self) -> Vec<f64> {
        (0..self.m).map(|i| i as f64 / (self.m - 1) as f64).collect()
    }

    /// Coupling matrix `B = w diag(omega)`.
    pub fn coupling_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl EpsilonFamily for Nf1Family {
    fn name(&self) -> String {
        format!("NF1(m={})", self.m)
    }
    fn m(&self) -> usize {
        self.m
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
    fn f(&self, x: &[f64], y: &[f64], _eps: f64, out: &mut [f64]) {
        let s: Vec<f64> = x.iter().map(|&u| nf1_response(u).0).collect();
        crate::integrate::matvec(&self.b, &s, out);
        for i in 0..self.m {
            out[i] = -x[i] + y[0] * out[i] + self.input[i];
        }
    }
    fn g(&self, _x: &[f64], _y: &[f64], eps: f64, out: &mut [f64]) {
        out[0] = eps;
    }
    fn a0(&self, y: &[f64], _eps: f64, out: &mut DMatrix<f64>) {
        out.copy_from(&(&self.b * y[0]));
        for i in 0..self.m {
            out[(i, i)] -= 1.0;
        }
    }
    fn has_jacobians(&self) -> bool {
        true
    }
    fn has_hessians(&self) -> bool {
        true
    }
    fn jac_f(&self, x: &[f64], y: &[f64], _eps: f64, dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        let m = self.m;
        let mut s = vec![0.0; m];
        for j in 0..m {
            let (sv, s1, _) = nf1_response(x[j]);
            s[j] = sv;
            for i in 0..m {
                dx[(i, j)] = y[0] * self.b[(i, j)] * s1;
            }
            dx[(j, j)] -= 1.0;
        }
        let bs = &self.b * nalgebra::DVector::from_vec(s);
        for i in 0..m {
            dy[(i, 0)] = bs[i];
        }
        Ok(())
    }
    fn jac_g(&self, _x: &[f64], _y: &[f64], _eps: f64, dx: &mut DMatrix<f64>, dy: &mut DMatrix<f64>) -> Result<()> {
        dx.fill(0.0);
        dy.fill(0.0);
        Ok(())
    }
    fn hess_f(&self, x: &[f64], y: &[f64], _eps: f64, u: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        let m = self.m;
        let (uy, vy) = (u[m], v[m]);
        let mut t = vec![0.0; m];
        for j in 0..m {
            let (_, s1, s2) = nf1_response(x[j]);
            t[j] = y[0] * s2 * u[j] * v[j] + s1 * (uy * v[j] + vy * u[j]);
        }
        crate::integrate::matvec(&self.b, &t, out);
        Ok(())
    }
    fn hess_g(&self, _x: &[f64], _y: &[f64], _eps: f64, _u: &[f64], _v: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = 0.0;
        Ok(())
    }
}

/// Epsilon family of an example (VDP-cut returns the uncut Van der Pol family).
pub fn family(id: ExampleId, params: &ExampleParams) -> Result<Arc<dyn EpsilonFamily>> {
    let mut p = params.clone();
    p.fill_box(id);
    let domain = BoxDomain::new(p.lower.clone(), p.upper.clone())?;
    Ok(match id {
        ExampleId::L1 | ExampleId::Q1 | ExampleId::L2 => Arc::new(ScalarExample::new(id, domain)?),
        ExampleId::VdpCut => Arc::new(VdpFamily::new(domain, p.a)),
        ExampleId::NF1 => Arc::new(Nf1Family::new(p.m, p.coupling, p.length, domain)?),
    })
}

/// The example at `eps`; VDP-cut is shifted to its attracting sheet and cut off.
pub fn build_system(id: ExampleId, params: &ExampleParams, eps: f64) -> Result<SystemRef> {
    let fam = family(id, params)?;
    let base: SystemRef = Arc::new(AtEpsilon::new(fam, eps));
    if id != ExampleId::VdpCut {
        return Ok(base);
    }
    let dom = base.domain().clone();
    let nodes = GridDomain::new(dom.lower.clone(), dom.upper.clone(), vec![21])?;
    let sheet: Arc<dyn Sheet> = Arc::new(vdp_sheet());
    Ok(Arc::new(localize(base, sheet, &nodes, params.radius, CutoffSpec::default(), 1e-10)?))
}

/// Default fast-ball radius over which an example's constants are sampled.
pub fn default_x_radius(id: ExampleId, params: &ExampleParams) -> f64 {
    match id {
        ExampleId::VdpCut => params.radius,
        ExampleId::NF1 => 2.0,
        _ => 1.0,
    }
}

/// Closed-form slow manifold `h(y)`.
pub fn analytic_h(id: ExampleId, eps: f64, y: f64) -> Option<f64> {
    match id {
        ExampleId::L1 => Some(y - eps),
        ExampleId::Q1 => Some(y * y - 2.0 * eps * y + 2.0 * eps * eps),
        ExampleId::L2 => Some(0.0),
        _ => None,
    }
}

/// Closed-form `Dh(y)`.
pub fn analytic_dh(id: ExampleId, eps: f64, y: f64) -> Option<f64> {
    match id {
        ExampleId::L1 => Some(1.0),
        ExampleId::Q1 => Some(2.0 * y - 2.0 * eps),
        ExampleId::L2 => Some(0.0),
        _ => None,
    }
}

/// Closed-form `D^2 h(y)`.
pub fn analytic_d2h(id: ExampleId, _eps: f64, _y: f64) -> Option<f64> {
    match id {
        ExampleId::L1 | ExampleId::L2 => Some(0.0),
        ExampleId::Q1 => Some(2.0),
        _ => None,
    }
}

/// Closed-form reduction map `P(xi, eta)` in straightened coordinates.
pub fn analytic_p(id: ExampleId, eps: f64, xi: f64, eta: f64) -> Option<f64> {
    match id {
        ExampleId::L1 | ExampleId::Q1 => Some(eta),
        ExampleId::L2 => Some(eta + eps * xi),
        _ => None,
    }
}

/// Frozen-generator rotation family `[[-1, -1], [nu^2, -1]]`.
pub fn rotation_generator(nu: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, nu * nu, -1.0])
}

/// Frozen Jordan family `[[-1, nu], [0, -1]]`.
pub fn jordan_generator(nu: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[-1.0, nu, 0.0, -1.0])
}

/// `A(psi) = -I + c R(psi) N R(psi)^T` with `N = [[0, 1], [0, 0]]`; `|dA/dpsi| <= 2c`.
pub fn rotated_jordan(c: f64, psi: f64) -> DMatrix<f64> {
    let (s, co) = psi.sin_cos();
    let r = DMatrix::from_row_slice(2, 2, &[co, -s, s, co]);
    let n = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    -DMatrix::<f64>::identity(2, 2) + (&r * n * r.transpose()) * c
}

/// Process of the rotated Jordan family driven by `psi(t) = omega t`.
pub fn rotated_jordan_process(c: f64, omega: f64, step: f64) -> ProcessHandle {
    let driver = Driver::Closed { dim: 1, path: Arc::new(move |t, out| out[0] = omega * t) };
    ProcessHandle::custom(GeneratorKind::A0, 2, driver, step, move |y, out| out.copy_from(&rotated_jordan(c, y[0])))
}

/// Process of a constant generator.
pub fn constant_process(a: DMatrix<f64>, step: f64) -> ProcessHandle {
    let dim = a.nrows();
    ProcessHandle::custom(GeneratorKind::A0, dim, Driver::frozen(vec![0.0]), step, move |_, out| out.copy_from(&a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_derivatives;

    #[test]
    fn examples_pass_derivative_checks() {
        for id in [ExampleId::L1, ExampleId::Q1, ExampleId::L2, ExampleId::VdpCut, ExampleId::NF1] {
            let mut p = ExampleParams::for_example(id);
            p.m = 16;
            let sys = build_system(id, &p, 0.05).unwrap();
            let r = default_x_radius(id, &p);
            let c = check_derivatives(sys.as_ref(), 100, r, 3).unwrap();
            assert!(c.worst() <= 1e-5, "{id}: {c:?}");
        }
    }

    #[test]
    fn response_is_tanh_inside_and_linear_outside() {
        for u in [-1.9, -0.3, 0.0, 0.7, 2.0] {
            assert!((nf1_response(u).0 - u.tanh()).abs() < 1e-15);
        }
        for u in [-7.0, 4.0, 5.5] {
            let (s, s1, s2) = nf1_response(u);
            assert_eq!((s, s1, s2), (u, 1.0, 0.0));
        }
    }

    #[test]
    fn vdp_branch_solves_nullcline() {
        for y in [0.0, 0.5, 2.0] {
            let x = vdp_branch(y);
            assert!(x > 1.0 && (x * x * x / 3.0 - x - y).abs() < 1e-12);
        }
        assert!((vdp_branch(0.0) - 3f64.sqrt()).abs() < 1e-12);
        let sys = build_system(ExampleId::VdpCut, &ExampleParams::for_example(ExampleId::VdpCut), 0.0).unwrap();
        let mut f = [0.0];
        sys.f(&[0.0], &[1.0], &mut f);
        assert!(f[0].abs() < 1e-12);
    }
}
