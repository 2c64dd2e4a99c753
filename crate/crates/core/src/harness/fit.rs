//! Exponential decay fits.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlowFastError};

/// `value ~ prefactor * exp(-rate t)` fitted by least squares on `ln value`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub rate: f64,
    pub prefactor: f64,
    pub r2: f64,
    /// Samples used (those above the noise floor).
    pub used: usize,
    /// `|rate|` below `1e-6`: no measurable decay.
    pub flat: bool,
}

/// Fits samples `(t, value)` with `value > noise_floor`; needs at least five of them.
pub fn fit_exponential(samples: &[(f64, f64)], noise_floor: f64) -> Result<ExpFit> {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(t, v)| t.is_finite() && v.is_finite() && *v > noise_floor && *v > 0.0)
        .map(|&(t, v)| (t, v.ln()))
        .collect();
    if pts.len() < 5 {
        return Err(SlowFastError::Underdetermined(format!("{} samples above the noise floor", pts.len())));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let stl: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let sll: f64 = pts.iter().map(|p| (p.1 - ml).powi(2)).sum();
    if stt == 0.0 {
        return Err(SlowFastError::Underdetermined("all samples at one time".into()));
    }
    let slope = stl / stt;
    let icpt = ml - slope * mt;
    let sse: f64 = pts.iter().map(|p| (p.1 - icpt - slope * p.0).powi(2)).sum();
    let r2 = if sll > 0.0 { 1.0 - sse / sll } else { 1.0 };
    Ok(ExpFit { rate: -slope, prefactor: icpt.exp(), r2, used: pts.len(), flat: slope.abs() < 1e-6 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        (0..100).map(|i| i as f64 * 0.1).map(|t| (t, f(t))).collect()
    }

    #[test]
    fn exact_exponential() {
        let r = fit_exponential(&grid(|t| 3.0 * (-2.0 * t).exp()), 0.0).unwrap();
        assert!((r.rate - 2.0).abs() < 1e-10 && (r.prefactor - 3.0).abs() < 1e-9 && r.r2 >= 0.999);
    }

    #[test]
    fn constant_is_flagged() {
        let r = fit_exponential(&grid(|_| 0.7), 0.0).unwrap();
        assert!(r.flat && r.rate.abs() < 1e-12);
    }

    #[test]
    fn perturbed_exponential() {
        let r = fit_exponential(&grid(|t| (-t).exp() * (1.0 + 0.01 * t.sin())), 0.0).unwrap();
        assert!((r.rate - 1.0).abs() < 0.02);
    }

    #[test]
    fn too_few_samples() {
        let s = [(0.0, 1.0), (1.0, 0.5), (2.0, 1e-20)];
        assert!(matches!(fit_exponential(&s, 1e-10), Err(SlowFastError::Underdetermined(_))));
    }
}
