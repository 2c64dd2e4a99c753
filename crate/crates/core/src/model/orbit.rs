//! Time-sampled trajectories and state wrappers.

use serde::{Deserialize, Serialize};

use super::grid::BoxDomain;
use super::norm::Norm;
use crate::error::{Result, SlowFastError};

/// Fast-space vector together with the norm it is measured in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastState {
    pub coords: Vec<f64>,
    pub norm_kind: Norm,
}

impl FastState {
    pub fn new(coords: Vec<f64>, norm_kind: Norm) -> Self {
        Self { coords, norm_kind }
    }

    /// `|x|` in this state's norm.
    pub fn norm(&self) -> f64 {
        self.norm_kind.norm(&self.coords)
    }
}

/// Slow-space vector checked against a box on construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlowState {
    coords: Vec<f64>,
}

impl SlowState {
    /// Fails with a domain error outside `domain`; never clamps.
    pub fn new(coords: Vec<f64>, domain: &BoxDomain) -> Result<Self> {
        domain.check(&coords)?;
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Sampled trajectory `(x(t), y(t))` on strictly increasing times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitPath {
    pub times: Vec<f64>,
    /// Row-major `len x m`.
    pub fast: Vec<f64>,
    /// Row-major `len x n`.
    pub slow: Vec<f64>,
    pub m: usize,
    pub n: usize,
    /// Integrator step used to produce the path.
    pub step: f64,
    /// Truncation horizon, when the path approximates an infinite-time object.
    pub horizon: Option<f64>,
}

impl OrbitPath {
    /// Builds a path, validating ordering and array lengths.
    pub fn new(times: Vec<f64>, fast: Vec<f64>, slow: Vec<f64>, m: usize, n: usize, step: f64) -> Result<Self> {
        if fast.len() != times.len() * m || slow.len() != times.len() * n {
            return Err(SlowFastError::Argument("orbit arrays do not match times".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SlowFastError::Argument("orbit times must increase strictly".into()));
        }
        Ok(Self { times, fast, slow, m, n, step, horizon: None })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn fast_at(&self, i: usize) -> &[f64] {
        &self.fast[i * self.m..(i + 1) * self.m]
    }

    pub fn slow_at(&self, i: usize) -> &[f64] {
        &self.slow[i * self.n..(i + 1) * self.n]
    }

    /// Last sample.
    pub fn last(&self) -> (f64, &[f64], &[f64]) {
        let i = self.len() - 1;
        (self.times[i], self.fast_at(i), self.slow_at(i))
    }

    /// `max_i e^{gamma |t_i|} |x(t_i)|`.
    pub fn weighted_norm(&self, gamma: f64, norm: &Norm) -> f64 {
        (0..self.len()).fold(0.0, |a, i| {
            a.max((gamma * self.times[i].abs()).exp() * norm.norm(self.fast_at(i)))
        })
    }

    /// Index of the sample nearest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        match self.times.binary_search_by(|v| v.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less)) {
            Ok(i) => i,
            Err(i) => {
                if i == 0 {
                    0
                } else if i >= self.len() {
                    self.len() - 1
                } else if (self.times[i] - t).abs() < (t - self.times[i - 1]).abs() {
                    i
                } else {
                    i - 1
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn weighted_norm_monotone(vals in proptest::collection::vec(-5.0f64..5.0, 2..20), g1 in 0.0f64..2.0, dg in 0.0f64..2.0) {
            let n = vals.len();
            let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.3).collect();
            let p = OrbitPath::new(times, vals.clone(), vec![0.0; n], 1, 1, 0.3).unwrap();
            prop_assert!(p.weighted_norm(g1, &Norm::Sup) <= p.weighted_norm(g1 + dg, &Norm::Sup));
        }

        #[test]
        fn triangle_inequality(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let s: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            for norm in [Norm::Euclidean, Norm::Sup, Norm::WeightedQuadrature(vec![0.1, 0.2, 0.3, 0.4])] {
                prop_assert!(norm.norm(&s) <= norm.norm(&a) + norm.norm(&b) + 1e-12);
                prop_assert!(norm.norm(&a) >= 0.0);
            }
        }
    }

    #[test]
    fn zero_norm_iff_zero() {
        let z = FastState::new(vec![0.0; 3], Norm::Sup);
        assert_eq!(z.norm(), 0.0);
        let x = FastState::new(vec![0.0, 1e-300, 0.0], Norm::Euclidean);
        assert!(x.norm() > 0.0 || x.coords.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn slow_state_rejects_outside() {
        let d = BoxDomain::new(vec![0.0], vec![1.0]).unwrap();
        assert!(SlowState::new(vec![0.5], &d).is_ok());
        assert!(matches!(SlowState::new(vec![1.5], &d), Err(SlowFastError::Domain { .. })));
    }

    #[test]
    fn rejects_unordered_times() {
        assert!(OrbitPath::new(vec![0.0, 0.0], vec![0.0; 2], vec![0.0; 2], 1, 1, 0.1).is_err());
    }
}
