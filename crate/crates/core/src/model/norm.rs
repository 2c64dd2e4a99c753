//! Norms on the fast space and induced operator norms.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Largest column count for which sup-to-Euclidean operator norms are computed exactly
/// by enumerating cube vertices.
const MAX_VERTEX_COLS: usize = 16;

/// Norm on a coordinate space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// `sqrt(sum x_i^2)`.
    #[default]
    Euclidean,
    /// `max |x_i|`.
    Sup,
    /// `sqrt(sum w_i x_i^2)`, a quadrature approximation of an L2 norm.
    WeightedQuadrature(Vec<f64>),
}

impl Norm {
    /// Norm of a vector.
    pub fn norm(&self, x: &[f64]) -> f64 {
        match self {
            Norm::Euclidean => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Norm::Sup => x.iter().fold(0.0, |a, v| a.max(v.abs())),
            Norm::WeightedQuadrature(w) => x
                .iter()
                .zip(w.iter())
                .map(|(v, wi)| wi * v * v)
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Norm of the difference `a - b`.
    pub fn dist(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Norm::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Norm::Sup => a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs())),
            Norm::WeightedQuadrature(w) => a
                .iter()
                .zip(b)
                .zip(w)
                .map(|((x, y), wi)| wi * (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Dual norm of a row functional `r`, i.e. `sup_{|x| <= 1} r.x`.
    fn dual(&self, r: &[f64]) -> f64 {
        match self {
            Norm::Euclidean => r.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Norm::Sup => r.iter().map(|v| v.abs()).sum(),
            Norm::WeightedQuadrature(w) => r
                .iter()
                .zip(w)
                .map(|(v, wi)| v * v / wi)
                .sum::<f64>()
                .sqrt(),
        }
    }

    fn weights(&self, len: usize) -> Option<Vec<f64>> {
        match self {
            Norm::Euclidean => Some(vec![1.0; len]),
            Norm::WeightedQuadrature(w) => Some(w.clone()),
            Norm::Sup => None,
        }
    }
}

/// Operator norm of `mat` viewed as a map from `(R^cols, src)` to `(R^rows, dst)`.
pub fn op_norm(mat: &DMatrix<f64>, src: &Norm, dst: &Norm) -> f64 {
    let (rows, cols) = mat.shape();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    if let Norm::Sup = dst {
        let mut best: f64 = 0.0;
        let mut row = vec![0.0; cols];
        for i in 0..rows {
            for (j, r) in row.iter_mut().enumerate() {
                *r = mat[(i, j)];
            }
            best = best.max(src.dual(&row));
        }
        return best;
    }
    let dw = dst.weights(rows).expect("non-sup destination");
    match src.weights(cols) {
        Some(sw) => {
            let scaled = DMatrix::from_fn(rows, cols, |i, j| {
                mat[(i, j)] * dw[i].sqrt() / sw[j].sqrt()
            });
            let sv = scaled.singular_values();
            sv.iter().fold(0.0, |a, v| a.max(*v))
        }
        None => {
            if cols <= MAX_VERTEX_COLS {
                let mut best: f64 = 0.0;
                let mut y = vec![0.0; rows];
                for mask in 0..(1usize << cols) {
                    for (i, yi) in y.iter_mut().enumerate() {
                        *yi = (0..cols)
                            .map(|j| {
                                let s = if mask >> j & 1 == 1 { 1.0 } else { -1.0 };
                                s * mat[(i, j)]
                            })
                            .sum();
                    }
                    best = best.max(dst.norm(&y));
                }
                best
            } else {
                (0..cols)
                    .map(|j| dst.norm(mat.column(j).as_slice()))
                    .sum()
            }
        }
    }
}
