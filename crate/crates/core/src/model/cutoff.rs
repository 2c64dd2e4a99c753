//! Smooth cutoff `chi(r)`: 1 for `r <= inner`, 0 for `r >= 1`, C-infinity in between.

use serde::{Deserialize, Serialize};

/// Below this argument `exp(-1/x)` and its derivatives are treated as exactly zero.
const FLAT_EPS: f64 = 1e-3;

/// Cutoff parameters; the transition runs over `[inner, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub inner: f64,
}

impl Default for CutoffSpec {
    fn default() -> Self {
        Self { inner: 0.5 }
    }
}

/// `psi(x) = exp(-1/x)` for `x > 0` with its first two derivatives.
fn psi(x: f64) -> (f64, f64, f64) {
    if x <= FLAT_EPS {
        return (0.0, 0.0, 0.0);
    }
    let p = (-1.0 / x).exp();
    let x2 = x * x;
    (p, p / x2, p * (1.0 - 2.0 * x) / (x2 * x2))
}

impl CutoffSpec {
    /// `(chi, chi', chi'')` at `r`.
    pub fn eval(&self, r: f64) -> (f64, f64, f64) {
        let width = 1.0 - self.inner;
        if r <= self.inner {
            return (1.0, 0.0, 0.0);
        }
        if r >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        let s = (r - self.inner) / width;
        let (a, a1, a2) = {
            let (p, p1, p2) = psi(1.0 - s);
            (p, -p1, p2)
        };
        let (b, b1, b2) = psi(s);
        let d = a + b;
        let num = a1 * b - a * b1;
        let chi = a / d;
        let chi_s = num / (d * d);
        let num_s = a2 * b - a * b2;
        let d_s = a1 + b1;
        let chi_ss = (num_s * d - 2.0 * num * d_s) / (d * d * d);
        (chi, chi_s / width, chi_ss / (width * width))
    }

    /// `chi(r)` only.
    pub fn value(&self, r: f64) -> f64 {
        self.eval(r).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_and_support() {
        let c = CutoffSpec::default();
        assert_eq!(c.value(0.0), 1.0);
        assert_eq!(c.value(0.5), 1.0);
        assert_eq!(c.value(1.0), 0.0);
        assert_eq!(c.value(3.0), 0.0);
        assert!((c.value(0.75) - 0.5).abs() < 1e-12);
        let mut prev = 1.0;
        for i in 0..=100 {
            let v = c.value(0.5 + 0.005 * i as f64);
            assert!(v <= prev + 1e-15 && (0.0..=1.0).contains(&v));
            prev = v;
        }
    }

    #[test]
    fn derivatives_match_differences() {
        let c = CutoffSpec::default();
        let h = 1e-6;
        for i in 1..50 {
            let r = 0.5 + 0.01 * i as f64;
            let (_, d1, d2) = c.eval(r);
            let fd1 = (c.value(r + h) - c.value(r - h)) / (2.0 * h);
            let fd2 = (c.eval(r + h).1 - c.eval(r - h).1) / (2.0 * h);
            assert!((d1 - fd1).abs() < 1e-6, "r={r} {d1} {fd1}");
            assert!((d2 - fd2).abs() < 1e-4 * (1.0 + d2.abs()), "r={r} {d2} {fd2}");
        }
    }
}
