//! Constants certificates, sampled estimates of process and Lipschitz bounds,
//! the delta/rho budgets and the uniform-bound machinery for slowly varying generators.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::linalg::Schur;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlowFastError};
use crate::integrate::{Driver, GeneratorKind, IntegratorConfig, ProcessHandle};
use crate::model::{fd_jacobians, op_norm, r0_into, BoxDomain, FastSlowSystem, GridFunction, Norm};

/// Where a certificate field came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Supplied,
    Sampled,
    ClosedForm,
}

/// Provenance of every certificate field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenances {
    pub k: Provenance,
    pub mu: Provenance,
    pub m0: Provenance,
    pub m1x: Provenance,
    pub m1y: Provenance,
    pub n0: Provenance,
    pub n1: Provenance,
    pub delta: Provenance,
    pub rho: Provenance,
}

/// Default relative margin of the strict certificate inequalities.
pub const DEFAULT_MARGIN: f64 = 0.01;

/// The constants `(K, mu, M0, M1x, M1y, N0, N1, delta, rho)` with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsCertificate {
    pub k: f64,
    pub mu: f64,
    pub m0: f64,
    pub m1x: f64,
    pub m1y: f64,
    pub n0: f64,
    pub n1: f64,
    pub delta: f64,
    pub rho: f64,
    /// Relative margin: `a < b` is tested as `a (1 + margin) < b`.
    pub margin: f64,
    pub provenance: Provenances,
}

/// Pass/fail/unknown status of one hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Unknown,
}

/// One row of the hypothesis table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRow {
    pub name: String,
    pub condition: String,
    pub status: Status,
}

impl ConstantsCertificate {
    /// Certificate with every field supplied and the default margin.
    #[allow(clippy::too_many_arguments)]
    pub fn supplied(k: f64, mu: f64, m0: f64, m1x: f64, m1y: f64, n0: f64, n1: f64, delta: f64, rho: f64) -> Self {
        Self { k, mu, m0, m1x, m1y, n0, n1, delta, rho, margin: DEFAULT_MARGIN, provenance: Provenances::default() }
    }

    fn lt(&self, lhs: f64, rhs: f64) -> bool {
        lhs.is_finite() && rhs.is_finite() && lhs * (1.0 + self.margin) < rhs
    }

    /// `mu - K M1x`.
    pub fn gap(&self) -> f64 {
        self.mu - self.k * self.m1x
    }

    /// `K M1x < mu`.
    pub fn h_ok(&self) -> bool {
        self.lt(self.k * self.m1x, self.mu)
    }

    fn existence_at(&self, d: f64) -> bool {
        let lhs = self.k * self.m1x + self.n1 * (d + 1.0);
        if !self.lt(lhs, self.mu) {
            return false;
        }
        self.lt(self.k * self.m1y / (self.mu - lhs), d)
    }

    /// `K M1x + N1 (delta + 1) < mu` and `K M1y / (mu - K M1x - N1 (delta + 1)) < delta`.
    pub fn existence_ok(&self) -> bool {
        self.existence_at(self.delta)
    }

    /// `N1 (rho + 1) < mu - K M1x` and `K M1y / (mu - K M1x - N1 (rho + 1)) < rho`.
    pub fn smooth_ok(&self) -> bool {
        self.existence_at(self.rho)
    }

    /// `K N1 < mu`.
    pub fn reduction_ok(&self) -> bool {
        self.lt(self.k * self.n1, self.mu)
    }

    /// `2 N1 < mu - K M1x`, the second-derivative budget.
    pub fn second_order_ok(&self) -> bool {
        self.lt(2.0 * self.n1, self.gap()) && self.smooth_ok()
    }

    /// Contraction factor of the manifold map on the delta-ball.
    pub fn lambda_ratio(&self) -> f64 {
        self.k * self.m1y / ((self.delta + 1.0) * (self.gap() - self.n1 * (self.delta + 1.0)))
    }

    /// Contraction factor of the derivative map.
    pub fn gamma_ratio(&self) -> f64 {
        self.k * self.m1y / (self.rho * (self.gap() - self.n1 * (self.rho + 1.0)))
    }

    /// Bound on the first derivative field.
    pub fn dh_bound(&self) -> f64 {
        self.k * self.m1y / (self.gap() - self.n1 * (self.rho + 1.0))
    }

    /// Radius `K M0 / mu + delta` of the ball holding every iterate.
    pub fn ball_radius(&self) -> f64 {
        self.k * self.m0 / self.mu + self.delta
    }

    /// Norm bound `K M0 / mu + K M1y / (mu - K M1x)` on the slow manifold.
    pub fn norm_bound(&self) -> f64 {
        self.k * self.m0 / self.mu + self.k * self.m1y / self.gap()
    }

    /// Sets a field by name (`K`, `mu`, `M0`, `M1x`, `M1y`, `N0`, `N1`, `delta`, `rho`) and marks it supplied.
    pub fn set_field(&mut self, name: &str, value: f64) -> Result<()> {
        let p = Provenance::Supplied;
        match name.to_ascii_lowercase().as_str() {
            "k" => (self.k, self.provenance.k) = (value, p),
            "mu" => (self.mu, self.provenance.mu) = (value, p),
            "m0" => (self.m0, self.provenance.m0) = (value, p),
            "m1x" => (self.m1x, self.provenance.m1x) = (value, p),
            "m1y" => (self.m1y, self.provenance.m1y) = (value, p),
            "n0" => (self.n0, self.provenance.n0) = (value, p),
            "n1" => (self.n1, self.provenance.n1) = (value, p),
            "delta" => (self.delta, self.provenance.delta) = (value, p),
            "rho" => (self.rho, self.provenance.rho) = (value, p),
            "margin" => self.margin = value,
            _ => return Err(SlowFastError::Argument(format!("unknown certificate field '{name}'"))),
        }
        Ok(())
    }

    /// Checks `K >= 1`, `mu > 0` and non-negative constants.
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.m0, self.m1x, self.m1y, self.n0, self.n1];
        if !(self.k >= 1.0) || !(self.mu > 0.0) || nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(SlowFastError::Argument("certificate needs K >= 1, mu > 0, constants >= 0".into()));
        }
        if !(self.delta > 0.0) || !(self.rho > 0.0) {
            return Err(SlowFastError::Argument("delta and rho must be positive".into()));
        }
        Ok(())
    }

    /// Hypothesis table: process bound, Lipschitz bounds, existence and smoothness budgets,
    /// fast decay and slow Lipschitz condition of the reduction.
    pub fn hypothesis_table(&self) -> Vec<HypothesisRow> {
        let known = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        let st = |ok: bool, vals: &[f64]| {
            if !known(vals) {
                Status::Unknown
            } else if ok {
                Status::Pass
            } else {
                Status::Fail
            }
        };
        let row = |name: &str, cond: &str, status| HypothesisRow { name: name.into(), condition: cond.into(), status };
        vec![
            row("H1", "K >= 1, mu > 0", st(self.k >= 1.0 && self.mu > 0.0, &[self.k, self.mu])),
            row("H2", "K M1x < mu", st(self.h_ok(), &[self.k, self.m1x, self.mu, self.m0])),
            row(
                "H3",
                "K M1x + N1 (delta+1) < mu, K M1y / (mu - K M1x - N1 (delta+1)) < delta",
                st(self.existence_ok(), &[self.n1, self.m1y, self.delta]),
            ),
            row(
                "H3'",
                "K M1y / (mu - K M1x - N1 (rho+1)) < rho",
                st(self.smooth_ok(), &[self.n1, self.m1y, self.rho]),
            ),
            row("S1", "mu - K M1x > 0", st(self.gap() > 0.0, &[self.mu, self.m1x])),
            row("S2", "K N1 < mu", st(self.reduction_ok(), &[self.k, self.n1, self.mu])),
        ]
    }
}

/// Sampled process bound `|T(t, s)| <= K exp(-mu (t - s))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessBound {
    pub k: f64,
    pub mu: f64,
}

/// Fits `(K, mu)` to the envelope `g(tau) = max |T(s + tau, s)|` sampled on a uniform
/// `tau` grid: `mu` is the smallest decay slope over the tail `tau >= tau0`,
/// `K = max g(tau) exp(mu tau)`.
pub fn fit_log_envelope(taus: &[f64], envelope: &[f64]) -> Result<ProcessBound> {
    if taus.len() < 3 || taus.len() != envelope.len() {
        return Err(SlowFastError::Underdetermined("envelope needs at least three samples".into()));
    }
    let t_max = *taus.last().unwrap();
    let i0 = taus.iter().position(|&t| t >= 0.5 * t_max).unwrap_or(0).max(1);
    let l0 = envelope[i0].ln();
    let mut mu = f64::INFINITY;
    for i in i0 + 1..taus.len() {
        let slope = -(envelope[i].ln() - l0) / (taus[i] - taus[i0]);
        mu = mu.min(slope);
    }
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(SlowFastError::NoDecay(format!("tail decay slope {mu}")));
    }
    let k = taus.iter().zip(envelope).map(|(t, g)| g * (mu * t).exp()).fold(1.0f64, f64::max);
    Ok(ProcessBound { k, mu })
}

/// Slow drivers for process sampling: frozen paths at the box corners and center, then
/// seeded band-limited Fourier paths with `|psi'| <= n0`, clamped to the box.
pub fn sample_drivers(domain: &BoxDomain, n0: f64, count: usize, seed: u64) -> Vec<Driver> {
    let mut out: Vec<Driver> = domain.corners().into_iter().map(Driver::frozen).collect();
    let center: Vec<f64> = domain.lower.iter().zip(&domain.upper).map(|(a, b)| 0.5 * (a + b)).collect();
    out.push(Driver::frozen(center));
    if n0 <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = domain.dim();
    for _ in 0..count {
        let c: Vec<f64> = (0..n).map(|k| rng.gen_range(domain.lower[k]..=domain.upper[k])).collect();
        let modes: Vec<(f64, f64, f64)> =
            (0..3).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.1..2.0), rng.gen_range(0.0..2.0 * PI))).collect();
        let speed: f64 = modes.iter().map(|(a, w, _)| a.abs() * w).sum();
        let scale = n0 / speed.max(1e-12);
        let dirs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        let dmax = dirs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let (lo, hi) = (domain.lower.clone(), domain.upper.clone());
        out.push(Driver::Closed {
            dim: n,
            path: Arc::new(move |t, y| {
                let s: f64 = modes.iter().map(|(a, w, p)| a * ((w * t + p).sin() - p.sin())).sum::<f64>() * scale;
                for k in 0..y.len() {
                    y[k] = (c[k] + s * dirs[k] / dmax).clamp(lo[k], hi[k]);
                }
            }),
        });
    }
    out
}

/// Estimates `(K, mu)` of the `A0` process over the given drivers and start times in `[0, t_max/2]`.
///
/// Dense operators are used for `m <= 64`; larger systems sample random unit vectors.
pub fn estimate_process_bound(
    sys: Arc<dyn FastSlowSystem>,
    drivers: &[Driver],
    t_max: f64,
    cfg: &IntegratorConfig,
) -> Result<ProcessBound> {
    if drivers.is_empty() {
        return Err(SlowFastError::Argument("no drivers to sample".into()));
    }
    let norm = sys.fast_norm().clone();
    let starts = [0.0, 0.25 * t_max, 0.5 * t_max];
    let envs: Vec<Vec<(f64, f64)>> = drivers
        .par_iter()
        .flat_map_iter(|d| starts.iter().map(move |&s| (d.clone(), s)))
        .map(|(d, s)| envelope_of(&ProcessHandle::a0(sys.clone(), d, cfg.step), s, t_max, &norm))
        .collect::<Result<_>>()?;
    let taus: Vec<f64> = envs[0].iter().map(|p| p.0).collect();
    let env: Vec<f64> = (0..taus.len()).map(|i| envs.iter().map(|e| e[i].1).fold(0.0, f64::max)).collect();
    fit_log_envelope(&taus, &env)
}

/// `tau -> |T(s + tau, s)|` for `tau in [0, t_max]`.
pub fn envelope_of(p: &ProcessHandle, s: f64, t_max: f64, norm: &Norm) -> Result<Vec<(f64, f64)>> {
    if p.dim <= 64 {
        return Ok(p.matrices_from(s, t_max)?.into_iter().map(|(t, m)| (t, op_norm(&m, norm, norm))).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.to_bits());
    let probes: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            let v: Vec<f64> = (0..p.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nv = norm.norm(&v);
            v.into_iter().map(|x| x / nv).collect()
        })
        .collect();
    let steps = (t_max / p.step).ceil() as usize;
    let h = t_max / steps as f64;
    let mut out = vec![(0.0, 1.0)];
    let mut cur = probes.clone();
    for k in 0..steps {
        let t = s + k as f64 * h;
        let mut g = 0.0f64;
        for v in cur.iter_mut() {
            *v = p.apply(t + h, t, v)?;
            g = g.max(norm.norm(v));
        }
        out.push(((k + 1) as f64 * h, g));
    }
    Ok(out)
}

/// Closed-form bound for a scalar fast variable: `K = 1`, `mu = min_y -a0(y)` over sampled `y`.
pub fn scalar_process_bound(sys: &dyn FastSlowSystem, samples: &[Vec<f64>]) -> Result<ProcessBound> {
    if sys.m() != 1 {
        return Err(SlowFastError::Capability("closed-form process bound needs m = 1".into()));
    }
    let mut a = DMatrix::zeros(1, 1);
    let mut mu = f64::INFINITY;
    for y in samples {
        sys.a0(y, &mut a);
        mu = mu.min(-a[(0, 0)]);
    }
    if !(mu > 0.0) {
        return Err(SlowFastError::NoDecay(format!("a0 reaches {}", -mu)));
    }
    Ok(ProcessBound { k: 1.0, mu })
}

/// Sampled Lipschitz and sup constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub m0: f64,
    pub m1x: f64,
    pub m1y: f64,
    pub n0: f64,
    pub n1: f64,
}

/// Sampling set for constant estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingOptions {
    pub samples: usize,
    /// Radius of the fast ball `|x| <= x_radius` the constants are taken over.
    pub x_radius: f64,
    pub seed: u64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { samples: 1000, x_radius: 1.0, seed: 0 }
    }
}

/// Deterministic then seeded points `(x, y)`; a larger budget extends the same sequence.
pub fn sample_points(sys: &dyn FastSlowSystem, opts: &SamplingOptions) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (m, n) = (sys.m(), sys.n());
    let dom = sys.domain();
    let per_axis: usize = if n <= 2 { 5 } else { 2 };
    let mut ys: Vec<Vec<f64>> = Vec::new();
    let total = per_axis.pow(n as u32);
    for idx in 0..total {
        let mut r = idx;
        let y: Vec<f64> = (0..n)
            .map(|k| {
                let i = r % per_axis;
                r /= per_axis;
                dom.lower[k] + (dom.upper[k] - dom.lower[k]) * i as f64 / (per_axis - 1) as f64
            })
            .collect();
        ys.push(y);
    }
    let mut pts: Vec<(Vec<f64>, Vec<f64>)> = ys.into_iter().map(|y| (vec![0.0; m], y)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let norm = sys.fast_norm();
    while pts.len() < opts.samples.max(1) {
        let y: Vec<f64> = (0..n).map(|k| rng.gen_range(dom.lower[k]..=dom.upper[k])).collect();
        let dir: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nd = norm.norm(&dir).max(1e-300);
        let r = opts.x_radius * rng.gen::<f64>();
        let x: Vec<f64> = dir.iter().map(|v| v * r / nd).collect();
        pts.push((x, y));
    }
    pts.truncate(opts.samples.max(1));
    pts
}

/// Sampled `M0 = sup |R0|`, `M1x = sup |D_x R0|`, `M1y = sup |D_y F|`, `N0 = sup |g|`,
/// `N1 = sup max(|D_x g|, |D_y g|)` over the fast ball times the slow box.
/// The slow norm is the sup norm.
pub fn estimate_lipschitz(sys: &dyn FastSlowSystem, opts: &SamplingOptions) -> Result<LipschitzEstimate> {
    let (m, n) = (sys.m(), sys.n());
    let fnorm = sys.fast_norm().clone();
    let snorm = Norm::Sup;
    let pts = sample_points(sys, opts);
    let per: Vec<[f64; 5]> = pts
        .par_iter()
        .map(|(x, y)| -> Result<[f64; 5]> {
            let mut r = vec![0.0; m];
            r0_into(sys, x, y, &mut r);
            let mut gv = vec![0.0; n];
            sys.g(x, y, &mut gv);
            let (fx, fy, gx, gy) = if sys.has_jacobians() {
                let mut j = (DMatrix::zeros(m, m), DMatrix::zeros(m, n), DMatrix::zeros(n, m), DMatrix::zeros(n, n));
                sys.jac_f(x, y, &mut j.0, &mut j.1)?;
                sys.jac_g(x, y, &mut j.2, &mut j.3)?;
                j
            } else {
                fd_jacobians(sys, x, y)
            };
            let mut a = DMatrix::zeros(m, m);
            sys.a0(y, &mut a);
            let rx = fx - a;
            Ok([
                fnorm.norm(&r),
                op_norm(&rx, &fnorm, &fnorm),
                op_norm(&fy, &snorm, &fnorm),
                snorm.norm(&gv),
                op_norm(&gx, &fnorm, &snorm).max(op_norm(&gy, &snorm, &snorm)),
            ])
        })
        .collect::<Result<_>>()?;
    let mut e = [0.0f64; 5];
    for p in &per {
        for i in 0..5 {
            e[i] = e[i].max(p[i]);
        }
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(SlowFastError::Numeric("non-finite constant estimate".into()));
    }
    Ok(LipschitzEstimate { m0: e[0], m1x: e[1], m1y: e[2], n0: e[3], n1: e[4] })
}

/// Result of the delta budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaBudget {
    pub delta: f64,
    pub n1_cap: f64,
    /// `M1y = 0`: delta sits at the machine floor and any `N1 < (mu - K M1x)/2` suffices.
    pub degenerate: bool,
}

/// `delta = 2 K M1y / (mu - K M1x)`, `N1_cap = (mu - K M1x) / (2 (delta + 1))`.
pub fn delta_budget(cert: &ConstantsCertificate) -> Result<DeltaBudget> {
    let gap = cert.gap();
    if !(gap > 0.0) {
        return Err(SlowFastError::Infeasible(format!("K*M1x = {} >= mu = {}", cert.k * cert.m1x, cert.mu)));
    }
    if cert.m1y == 0.0 {
        let delta = f64::EPSILON;
        return Ok(DeltaBudget { delta, n1_cap: gap / (2.0 * (delta + 1.0)), degenerate: true });
    }
    let delta = 2.0 * cert.k * cert.m1y / gap;
    Ok(DeltaBudget { delta, n1_cap: gap / (2.0 * (delta + 1.0)), degenerate: false })
}

/// Smallest `rho > delta` with `N1 (rho + 1) < mu - K M1x` and
/// `K M1y / (mu - K M1x - N1 (rho + 1)) < rho`, honoring the certificate margin.
pub fn rho_budget(cert: &ConstantsCertificate) -> Result<f64> {
    let gap = cert.gap();
    if !(gap > 0.0) {
        return Err(SlowFastError::Infeasible("K*M1x >= mu".into()));
    }
    let km = cert.k * cert.m1y;
    let mg = 1.0 + cert.margin;
    // phi(r) > 0 encodes both inequalities with the margin.
    let phi = |r: f64| -> f64 {
        let den = gap - cert.n1 * (r + 1.0) * mg;
        if den <= 0.0 {
            return f64::NEG_INFINITY;
        }
        r - km * mg * mg / den
    };
    let admissible = |r: f64| {
        let mut c = cert.clone();
        c.rho = r;
        c.smooth_ok() && r > cert.delta
    };
    let hi_lim = if cert.n1 > 0.0 { gap / (cert.n1 * mg) - 1.0 } else { f64::INFINITY };
    let floor = cert.delta.max(0.0);
    if admissible(floor * (1.0 + 1e-9) + 1e-15) {
        let r = floor * (1.0 + 1e-9) + 1e-15;
        return Ok(r);
    }
    // phi is concave on (−1, hi_lim): locate its maximum then the lower root.
    let (mut a, mut b) = (floor, if hi_lim.is_finite() { hi_lim } else { floor + 10.0 * (km / gap + 1.0) * mg * mg });
    if !(b > a) {
        return Err(SlowFastError::Infeasible("no admissible rho".into()));
    }
    for _ in 0..200 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if phi(m1) < phi(m2) {
            a = m1;
        } else {
            b = m2;
        }
    }
    let peak = 0.5 * (a + b);
    if !(phi(peak) > 0.0) {
        return Err(SlowFastError::Infeasible(format!("no rho satisfies the smoothness budget (max {})", phi(peak))));
    }
    let (mut lo, mut hi) = (floor, peak);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut r = hi;
    for _ in 0..60 {
        if admissible(r) {
            return Ok(r);
        }
        r = r + (peak - r) * 0.5;
    }
    Err(SlowFastError::Infeasible("no admissible rho".into()))
}

/// `l = ln(K) / eps`, the smallest window with `K exp(-mu l) <= exp(-(mu - eps) l)`.
pub fn frozen_coefficient_window(k: f64, mu: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < mu) || !(k >= 1.0) {
        return Err(SlowFastError::Argument(format!("need 0 < eps < mu and K >= 1 (K={k}, mu={mu}, eps={eps})")));
    }
    Ok(k.ln() / eps)
}

/// Caps on `M0`, `N0` and the window `l` for a slowly drifting generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftBudget {
    pub m0_cap: f64,
    pub n0_cap: f64,
    pub l: f64,
}

/// Window `l` from [`frozen_coefficient_window`] (`l = 1` when `K = 1`), then caps splitting
/// `K (M1nu N0 l + 2 M0) <= mu_tilde - mu_target` equally between the two terms.
pub fn slow_drift_budget(k: f64, mu_tilde: f64, mu_target: f64, m1nu: f64) -> Result<DriftBudget> {
    if !(0.0 < mu_target && mu_target < mu_tilde) {
        return Err(SlowFastError::Argument("need 0 < mu_target < mu_tilde".into()));
    }
    let l = if k == 1.0 { 1.0 } else { frozen_coefficient_window(k, mu_tilde, mu_tilde - mu_target)? };
    let half = 0.5 * (mu_tilde - mu_target);
    if !(m1nu >= 0.0) || !(l > 0.0) || !half.is_finite() {
        return Err(SlowFastError::Infeasible("drift budget cannot be split".into()));
    }
    let n0_cap = if m1nu > 0.0 { half / (k * m1nu * l) } else { f64::INFINITY };
    let m0_cap = half / (2.0 * k);
    Ok(DriftBudget { m0_cap, n0_cap, l })
}

/// Spectral gap verdict.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralGap {
    /// Max over nodes of the largest real part of the spectrum of `D_xF(h0(y), y)`.
    pub max_re: f64,
    /// `-max_re - mu_req`.
    pub margin: f64,
    pub pass: bool,
}

/// Largest real part of the eigenvalues of a dense square matrix.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> Result<f64> {
    let schur = Schur::try_new(a.clone(), 1e-13, 100_000).ok_or_else(|| SlowFastError::Numeric("Schur iteration failed".into()))?;
    Ok(schur.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Max real part of the spectrum of `D_xF(h0(y), y)` over the nodes of `h0`, against `-mu_req`.
pub fn spectral_gap_check(sys: &dyn FastSlowSystem, h0: &GridFunction, mu_req: f64) -> Result<SpectralGap> {
    let (m, n) = (sys.m(), sys.n());
    if m > 512 {
        return Err(SlowFastError::Capability("dense eigenvalues need m <= 512".into()));
    }
    let nodes = h0.domain.nodes();
    let vals: Vec<f64> = nodes
        .par_iter()
        .enumerate()
        .map(|(i, y)| -> Result<f64> {
            let x = h0.node_value(i);
            let fx = if sys.has_jacobians() {
                let mut fx = DMatrix::zeros(m, m);
                let mut fy = DMatrix::zeros(m, n);
                sys.jac_f(x, y, &mut fx, &mut fy)?;
                fx
            } else {
                fd_jacobians(sys, x, y).0
            };
            spectral_abscissa(&fx)
        })
        .collect::<Result<_>>()?;
    let max_re = vals.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let margin = -max_re - mu_req;
    Ok(SpectralGap { max_re, margin, pass: margin > 0.0 })
}

/// Options of [`certify_system`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyOptions {
    pub sampling: SamplingOptions,
    /// Random slow drivers on top of the frozen corner and center paths.
    pub drivers: usize,
    /// Window `t_max` of the process envelope.
    pub process_horizon: f64,
    pub process_step: f64,
    /// Named field overrides applied after estimation (`delta`, `rho` after the budgets).
    pub overrides: BTreeMap<String, f64>,
    pub margin: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            sampling: SamplingOptions::default(),
            drivers: 2,
            process_horizon: 10.0,
            process_step: 0.02,
            overrides: BTreeMap::new(),
            margin: DEFAULT_MARGIN,
        }
    }
}

/// Certificate with the raw estimates it was built from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Certification {
    pub certificate: ConstantsCertificate,
    pub process: ProcessBound,
    pub lipschitz: LipschitzEstimate,
}

/// Estimates `(K, mu)` (closed form when `m = 1`) and the Lipschitz constants, applies the
/// overrides, then fills `delta` and `rho` from their budgets unless overridden.
pub fn certify_system(sys: Arc<dyn FastSlowSystem>, opts: &CertifyOptions) -> Result<Certification> {
    let lip = estimate_lipschitz(sys.as_ref(), &opts.sampling)?;
    let (process, pk) = if sys.m() == 1 {
        let dom = sys.domain();
        let ys: Vec<Vec<f64>> = if dom.dim() == 1 {
            (0..=100).map(|i| vec![dom.lower[0] + (dom.upper[0] - dom.lower[0]) * i as f64 / 100.0]).collect()
        } else {
            sample_points(sys.as_ref(), &opts.sampling).into_iter().map(|p| p.1).collect()
        };
        (scalar_process_bound(sys.as_ref(), &ys)?, Provenance::ClosedForm)
    } else {
        let drivers = sample_drivers(sys.domain(), lip.n0, opts.drivers, opts.sampling.seed);
        let cfg = IntegratorConfig::with_step(opts.process_step);
        (estimate_process_bound(sys.clone(), &drivers, opts.process_horizon, &cfg)?, Provenance::Sampled)
    };
    let mut c = ConstantsCertificate::supplied(process.k, process.mu, lip.m0, lip.m1x, lip.m1y, lip.n0, lip.n1, 1.0, 1.0);
    c.margin = opts.margin;
    let s = Provenance::Sampled;
    c.provenance = Provenances {
        k: pk,
        mu: pk,
        m0: s,
        m1x: s,
        m1y: s,
        n0: s,
        n1: s,
        delta: Provenance::ClosedForm,
        rho: Provenance::ClosedForm,
    };
    let is_budget = |k: &str| matches!(k.to_ascii_lowercase().as_str(), "delta" | "rho");
    for (k, v) in opts.overrides.iter().filter(|(k, _)| !is_budget(k)) {
        c.set_field(k, *v)?;
    }
    c.delta = delta_budget(&c)?.delta;
    if let Some((k, v)) = opts.overrides.iter().find(|(k, _)| k.eq_ignore_ascii_case("delta")) {
        c.set_field(k, *v)?;
    }
    // No admissible rho leaves rho = delta, which fails the strict smoothness budget.
    c.rho = rho_budget(&c).unwrap_or(c.delta);
    if let Some((k, v)) = opts.overrides.iter().find(|(k, _)| k.eq_ignore_ascii_case("rho")) {
        c.set_field(k, *v)?;
    }
    Ok(Certification { certificate: c, process, lipschitz: lip })
}

/// Process of a constant or driver-dependent generator given as a closure; for harness families.
pub fn generator_process(
    dim: usize,
    driver: Driver,
    step: f64,
    generator: impl Fn(&[f64], &mut DMatrix<f64>) + Send + Sync + 'static,
) -> ProcessHandle {
    ProcessHandle::custom(GeneratorKind::A0, dim, driver, step, generator)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cert(k: f64, mu: f64, m1x: f64, m1y: f64, n1: f64) -> ConstantsCertificate {
        ConstantsCertificate::supplied(k, mu, 1.0, m1x, m1y, 0.0, n1, 1.0, 1.0)
    }

    #[test]
    fn delta_budget_closed_form() {
        let b = delta_budget(&cert(1.0, 1.0, 0.1, 0.2, 0.0)).unwrap();
        assert!((b.delta - 0.4 / 0.9).abs() < 1e-12);
        assert!((b.n1_cap - 0.9 / (2.0 * (1.0 + 0.4 / 0.9))).abs() < 1e-12);
        let b = delta_budget(&cert(1.0, 1.0, 0.0, 1.0, 0.0)).unwrap();
        assert!((b.delta - 2.0).abs() < 1e-12 && (b.n1_cap - 1.0 / 6.0).abs() < 1e-12);
        let b = delta_budget(&cert(1.0, 1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(b.degenerate && b.delta > 0.0);
        assert!(matches!(delta_budget(&cert(2.0, 1.0, 0.6, 0.1, 0.0)), Err(SlowFastError::Infeasible(_))));
    }

    #[test]
    fn delta_budget_implies_existence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let k = rng.gen_range(1.0..5.0);
            let mu = rng.gen_range(0.1..3.0);
            let m1x = rng.gen_range(0.0..0.95) * mu / k;
            let m1y = rng.gen_range(0.001..2.0);
            let mut c = cert(k, mu, m1x, m1y, 0.0);
            let b = delta_budget(&c).unwrap();
            c.delta = b.delta;
            c.n1 = rng.gen_range(0.0..0.9) * b.n1_cap;
            c.margin = 0.0;
            assert!(c.existence_ok(), "{c:?}");
        }
    }

    #[test]
    fn rho_budget_substitutes_back() {
        let mut c = cert(1.0, 1.0, 0.1, 0.2, 0.05);
        c.delta = delta_budget(&c).unwrap().delta;
        let rho = rho_budget(&c).unwrap();
        assert!(rho > c.delta);
        assert!(c.k * c.m1y / (c.gap() - c.n1 * (rho + 1.0)) < rho);
        let mut c = cert(1.0, 1.0, 0.0, 0.5, 0.0);
        c.delta = 0.4;
        let rho = rho_budget(&c).unwrap();
        assert!((rho - 0.5).abs() < 0.02, "{rho}");
    }

    #[test]
    fn window_and_drift_budget() {
        assert_eq!(frozen_coefficient_window(1.0, 1.0, 0.5).unwrap(), 0.0);
        assert!((frozen_coefficient_window(2.0, 1.0, 0.5).unwrap() - 1.386294).abs() < 1e-6);
        assert!(frozen_coefficient_window(2.0, 1.0, 1.0).is_err());
        for k in [1.0, 2.5, 10.0] {
            for eps in [0.1, 0.5, 0.9] {
                let l = frozen_coefficient_window(k, 1.0, eps).unwrap();
                assert!((k * (-l).exp() - (-(1.0 - eps) * l).exp()).abs() < 1e-12);
            }
        }
        let b = slow_drift_budget(2.0, 1.0, 0.5, 1.0).unwrap();
        assert!((b.l - 1.386294).abs() < 1e-6);
        assert!((b.n0_cap - 0.090168).abs() < 1e-6);
        assert!((b.m0_cap - 0.0625).abs() < 1e-12);
        assert!(2.0 * (b.n0_cap * b.l + 2.0 * b.m0_cap) <= 0.5 + 1e-12);
    }

    #[test]
    fn envelope_fit_exact_semigroup() {
        let taus: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let env: Vec<f64> = taus.iter().map(|t| (-t).exp()).collect();
        let b = fit_log_envelope(&taus, &env).unwrap();
        assert!((b.k - 1.0).abs() < 1e-9 && (b.mu - 1.0).abs() < 1e-9);
        let grow: Vec<f64> = taus.iter().map(|t| (0.1 * t).exp()).collect();
        assert!(matches!(fit_log_envelope(&taus, &grow), Err(SlowFastError::NoDecay(_))));
    }

    #[test]
    fn predicates_and_overrides() {
        let mut c = cert(1.0, 1.0, 0.0, 0.1, 0.0);
        c.delta = 0.2;
        c.rho = 0.2;
        assert!(c.h_ok() && c.existence_ok() && c.smooth_ok() && c.reduction_ok());
        c.set_field("N1", 10.0).unwrap();
        assert!(!c.existence_ok() && !c.reduction_ok());
        assert_eq!(c.provenance.n1, Provenance::Supplied);
        assert!(c.set_field("bogus", 1.0).is_err());
        let t = c.hypothesis_table();
        assert_eq!(t.len(), 6);
    }
}
