//! Boxes, uniform tensor grids and grid functions with multilinear interpolation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::norm::{op_norm, Norm};
use crate::error::{Result, SlowFastError};

/// Largest supported slow dimension.
pub const MAX_SLOW_DIM: usize = 8;

/// Relative slack used when testing box membership.
const MEMBERSHIP_SLACK: f64 = 1e-12;

/// Closed box `[lower, upper]` in `R^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    /// Builds a box, rejecting empty or inverted axes and `n = 0`.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(SlowFastError::Argument("slow dimension must be at least 1".into()));
        }
        if lower.len() != upper.len() || lower.len() > MAX_SLOW_DIM {
            return Err(SlowFastError::Argument("bad box dimensions".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(SlowFastError::Argument("box needs lower < upper on every axis".into()));
        }
        Ok(Self { lower, upper })
    }

    /// Dimension `n`.
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Membership with a relative slack of `1e-12` of the axis width.
    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter().enumerate().all(|(k, v)| {
            let tol = MEMBERSHIP_SLACK * (self.upper[k] - self.lower[k]).max(1.0);
            *v >= self.lower[k] - tol && *v <= self.upper[k] + tol
        })
    }

    /// Returns a domain error when `y` is outside the box.
    pub fn check(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(SlowFastError::Argument("slow vector has wrong length".into()));
        }
        if self.contains(y) {
            Ok(())
        } else {
            Err(SlowFastError::Domain {
                value: y.to_vec(),
                lower: self.lower.clone(),
                upper: self.upper.clone(),
            })
        }
    }

    /// Largest axis width.
    pub fn max_diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .fold(0.0, |a, (l, u)| a.max(u - l))
    }

    /// Box with every corner listed (2^n points).
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..(1usize << n))
            .map(|mask| {
                (0..n)
                    .map(|k| if mask >> k & 1 == 1 { self.upper[k] } else { self.lower[k] })
                    .collect()
            })
            .collect()
    }
}

/// Uniform tensor grid on a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

impl GridDomain {
    /// Builds a grid with `points[k] >= 2` nodes on axis `k`.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        BoxDomain::new(lower.clone(), upper.clone())?;
        if points.len() != lower.len() || points.iter().any(|p| *p < 2) {
            return Err(SlowFastError::Argument("need at least 2 points per axis".into()));
        }
        Ok(Self { lower, upper, points })
    }

    /// One-dimensional grid shorthand.
    pub fn interval(lower: f64, upper: f64, points: usize) -> Result<Self> {
        Self::new(vec![lower], vec![upper], vec![points])
    }

    /// Slow dimension.
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// The underlying box.
    pub fn bounds(&self) -> BoxDomain {
        BoxDomain { lower: self.lower.clone(), upper: self.upper.clone() }
    }

    /// Node spacing on axis `k`.
    pub fn spacing(&self, k: usize) -> f64 {
        (self.upper[k] - self.lower[k]) / (self.points[k] - 1) as f64
    }

    /// Total number of nodes.
    pub fn num_nodes(&self) -> usize {
        self.points.iter().product()
    }

    /// Multi-index of a linear node index (axis 0 fastest).
    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dim());
        for p in &self.points {
            out.push(idx % p);
            idx /= p;
        }
        out
    }

    /// Linear index of a multi-index.
    pub fn linear_index(&self, mi: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (k, p) in self.points.iter().enumerate() {
            idx += mi[k] * stride;
            stride *= p;
        }
        idx
    }

    /// Coordinates of node `idx`.
    pub fn node(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(k, i)| self.coord(k, *i))
            .collect()
    }

    /// Coordinate of index `i` on axis `k`; the last node is exactly `upper[k]`.
    pub fn coord(&self, k: usize, i: usize) -> f64 {
        if i + 1 == self.points[k] {
            self.upper[k]
        } else {
            self.lower[k] + i as f64 * self.spacing(k)
        }
    }

    /// All node coordinates in linear order.
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.num_nodes()).map(|i| self.node(i)).collect()
    }

    /// Grid extended by whole cells: `below[k]` cells under `lower[k]`, `above[k]` over `upper[k]`.
    pub fn extended(&self, below: &[usize], above: &[usize]) -> GridDomain {
        let n = self.dim();
        let mut lower = self.lower.clone();
        let mut upper = self.upper.clone();
        let mut points = self.points.clone();
        for k in 0..n {
            let h = self.spacing(k);
            lower[k] -= below[k] as f64 * h;
            upper[k] += above[k] as f64 * h;
            points[k] += below[k] + above[k];
        }
        GridDomain { lower, upper, points }
    }

    /// Grid with `2(p-1)+1` points per axis (nested refinement).
    pub fn refined(&self) -> GridDomain {
        GridDomain {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            points: self.points.iter().map(|p| 2 * (p - 1) + 1).collect(),
        }
    }

    /// Locates the cell containing `y`; positions outside the box are clamped when `clamp` is set.
    fn locate(&self, y: &[f64], clamp: bool) -> Result<([usize; MAX_SLOW_DIM], [f64; MAX_SLOW_DIM])> {
        let n = self.dim();
        if y.len() != n {
            return Err(SlowFastError::Argument("slow vector has wrong length".into()));
        }
        let mut cell = [0usize; MAX_SLOW_DIM];
        let mut frac = [0.0f64; MAX_SLOW_DIM];
        for k in 0..n {
            let h = self.spacing(k);
            let width = self.upper[k] - self.lower[k];
            let tol = MEMBERSHIP_SLACK * width.max(1.0);
            let mut v = y[k];
            if !v.is_finite() {
                return Err(SlowFastError::Numeric("non-finite slow coordinate".into()));
            }
            if v < self.lower[k] - tol || v > self.upper[k] + tol {
                if !clamp {
                    return Err(SlowFastError::Domain {
                        value: y.to_vec(),
                        lower: self.lower.clone(),
                        upper: self.upper.clone(),
                    });
                }
            }
            v = v.clamp(self.lower[k], self.upper[k]);
            let s = (v - self.lower[k]) / h;
            let mut i = s.floor() as isize;
            let last = self.points[k] as isize - 2;
            if i > last {
                i = last;
            }
            if i < 0 {
                i = 0;
            }
            cell[k] = i as usize;
            frac[k] = (s - i as f64).clamp(0.0, 1.0);
        }
        Ok((cell, frac))
    }
}

/// Vector-valued function sampled on a grid; each node stores `dim` numbers.
///
/// Operator-valued fields store column-major `rows x cols` blocks with `dim = rows * cols`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub domain: GridDomain,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl GridFunction {
    /// Zero function.
    pub fn zeros(domain: GridDomain, dim: usize) -> Self {
        let len = domain.num_nodes() * dim;
        Self { domain, dim, values: vec![0.0; len] }
    }

    /// Samples `f` at every node.
    pub fn from_fn(domain: GridDomain, dim: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut out = Self::zeros(domain, dim);
        for i in 0..out.domain.num_nodes() {
            let y = out.domain.node(i);
            f(&y, &mut out.values[i * dim..(i + 1) * dim]);
        }
        out
    }

    /// Builds from per-node vectors.
    pub fn from_nodes(domain: GridDomain, dim: usize, nodes: Vec<Vec<f64>>) -> Result<Self> {
        if nodes.len() != domain.num_nodes() || nodes.iter().any(|v| v.len() != dim) {
            return Err(SlowFastError::Argument("node values do not match grid".into()));
        }
        Ok(Self { domain, dim, values: nodes.into_iter().flatten().collect() })
    }

    /// Stored value at node `idx`.
    pub fn node_value(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Mutable node value.
    pub fn node_value_mut(&mut self, idx: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.values[idx * d..(idx + 1) * d]
    }

    fn interpolate(&self, cell: &[usize; MAX_SLOW_DIM], frac: &[f64; MAX_SLOW_DIM], out: &mut [f64]) {
        let n = self.domain.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut mi = [0usize; MAX_SLOW_DIM];
        for mask in 0..(1usize << n) {
            let mut w = 1.0;
            for k in 0..n {
                if mask >> k & 1 == 1 {
                    mi[k] = cell[k] + 1;
                    w *= frac[k];
                } else {
                    mi[k] = cell[k];
                    w *= 1.0 - frac[k];
                }
            }
            if w == 0.0 {
                continue;
            }
            let idx = self.domain.linear_index(&mi[..n]);
            let v = self.node_value(idx);
            for (o, x) in out.iter_mut().zip(v) {
                *o += w * x;
            }
        }
    }

    /// Multilinear interpolation; errors outside the grid box.
    pub fn eval(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        let (cell, frac) = self.domain.locate(y, false)?;
        self.interpolate(&cell, &frac, out);
        Ok(())
    }

    /// Multilinear interpolation after clamping `y` to the grid box.
    pub fn eval_clamped(&self, y: &[f64], out: &mut [f64]) {
        match self.domain.locate(y, true) {
            Ok((cell, frac)) => self.interpolate(&cell, &frac, out),
            Err(_) => out.iter_mut().for_each(|v| *v = f64::NAN),
        }
    }

    /// Convenience allocation form of [`GridFunction::eval`].
    pub fn at(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval(y, &mut out)?;
        Ok(out)
    }

    /// Derivative of the interpolant along axis `k` (piecewise constant in that axis).
    pub fn partial(&self, y: &[f64], k: usize, out: &mut [f64]) {
        let h = self.domain.spacing(k);
        let mut lo = y.to_vec();
        let mut hi = y.to_vec();
        let (cell, _) = match self.domain.locate(y, true) {
            Ok(c) => c,
            Err(_) => {
                out.iter_mut().for_each(|v| *v = f64::NAN);
                return;
            }
        };
        let a = self.domain.coord(k, cell[k]);
        lo[k] = a;
        hi[k] = a + h;
        let mut vlo = vec![0.0; self.dim];
        self.eval_clamped(&lo, &mut vlo);
        self.eval_clamped(&hi, out);
        for (o, l) in out.iter_mut().zip(&vlo) {
            *o = (*o - l) / h;
        }
    }

    /// `max_node |sigma(node)|` in the given norm.
    pub fn sup_norm(&self, norm: &Norm) -> f64 {
        (0..self.domain.num_nodes()).fold(0.0, |a, i| a.max(norm.norm(self.node_value(i))))
    }

    /// Sup over nodes of operator norms for an operator-valued field of shape `rows x cols`.
    pub fn sup_op_norm(&self, rows: usize, cols: usize, src: &Norm, dst: &Norm) -> f64 {
        assert_eq!(rows * cols, self.dim);
        (0..self.domain.num_nodes()).fold(0.0, |a, i| {
            let m = DMatrix::from_column_slice(rows, cols, self.node_value(i));
            a.max(op_norm(&m, src, dst))
        })
    }

    /// Max over adjacent node pairs of `|d sigma| / |d eta|`.
    pub fn lipschitz_estimate(&self, norm: &Norm) -> f64 {
        let g = &self.domain;
        let mut best: f64 = 0.0;
        for i in 0..g.num_nodes() {
            let mi = g.multi_index(i);
            for k in 0..g.dim() {
                if mi[k] + 1 < g.points[k] {
                    let mut mj = mi.clone();
                    mj[k] += 1;
                    let j = g.linear_index(&mj);
                    let d = norm.dist(self.node_value(i), self.node_value(j));
                    best = best.max(d / g.spacing(k));
                }
            }
        }
        best
    }

    /// Sup-norm distance to another function on the same grid.
    pub fn sup_dist(&self, other: &GridFunction, norm: &Norm) -> f64 {
        (0..self.domain.num_nodes()).fold(0.0, |a, i| {
            a.max(norm.dist(self.node_value(i), other.node_value(i)))
        })
    }

    /// Restriction to a sub-grid whose nodes coincide with nodes of this grid.
    pub fn restrict(&self, sub: &GridDomain) -> Result<GridFunction> {
        let offsets = node_offsets(&self.domain, sub)?;
        let mut out = GridFunction::zeros(sub.clone(), self.dim);
        for i in 0..sub.num_nodes() {
            let mi = sub.multi_index(i);
            let mj: Vec<usize> = mi.iter().zip(&offsets).map(|(a, (o, s))| o + a * s).collect();
            let j = self.domain.linear_index(&mj);
            out.node_value_mut(i).copy_from_slice(self.node_value(j));
        }
        Ok(out)
    }
}

/// For each axis, the (offset, stride) mapping sub-grid indices into `outer` indices.
pub fn node_offsets(outer: &GridDomain, sub: &GridDomain) -> Result<Vec<(usize, usize)>> {
    if outer.dim() != sub.dim() {
        return Err(SlowFastError::Argument("grid dimension mismatch".into()));
    }
    let mut res = Vec::with_capacity(outer.dim());
    for k in 0..outer.dim() {
        let h = outer.spacing(k);
        let hs = sub.spacing(k);
        let stride = (hs / h).round();
        let off = ((sub.lower[k] - outer.lower[k]) / h).round();
        let tol = 1e-9 * h.max(1e-300);
        if stride < 1.0
            || (stride * h - hs).abs() > tol * stride
            || off < 0.0
            || (off * h - (sub.lower[k] - outer.lower[k])).abs() > 1e-9 * h.max(1.0)
            || off as usize + (sub.points[k] - 1) * stride as usize >= outer.points[k]
        {
            return Err(SlowFastError::Argument("sub-grid nodes are not outer grid nodes".into()));
        }
        res.push((off as usize, stride as usize));
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_exact() {
        let g = GridDomain::new(vec![-1.0, 0.0], vec![1.0, 2.0], vec![5, 3]).unwrap();
        let f = GridFunction::from_fn(g.clone(), 1, |y, o| o[0] = y[0] * y[0] + y[1].sin());
        for i in 0..g.num_nodes() {
            let y = g.node(i);
            assert_eq!(f.at(&y).unwrap()[0], f.node_value(i)[0]);
        }
        assert!(f.at(&[1.5, 0.0]).is_err());
        let mut o = [0.0];
        f.eval_clamped(&[1.5, 0.0], &mut o);
        assert_eq!(o[0], f.at(&[1.0, 0.0]).unwrap()[0]);
    }

    #[test]
    fn bilinear_exact_on_bilinear() {
        let g = GridDomain::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![3, 4]).unwrap();
        let f = GridFunction::from_fn(g, 1, |y, o| o[0] = 1.0 + 2.0 * y[0] - y[1] + 3.0 * y[0] * y[1]);
        let v = f.at(&[0.3, 0.71]).unwrap()[0];
        assert!((v - (1.0 + 0.6 - 0.71 + 3.0 * 0.3 * 0.71)).abs() < 1e-14);
    }

    #[test]
    fn lipschitz_and_sup() {
        let g = GridDomain::interval(0.0, 1.0, 11).unwrap();
        let f = GridFunction::from_fn(g, 1, |y, o| o[0] = 3.0 * y[0] - 2.0);
        assert!((f.lipschitz_estimate(&Norm::Sup) - 3.0).abs() < 1e-12);
        assert_eq!(f.sup_norm(&Norm::Sup), 2.0);
    }

    #[test]
    fn extend_and_restrict() {
        let g = GridDomain::interval(-0.5, 0.5, 11).unwrap();
        let e = g.extended(&[3], &[0]);
        assert!((e.lower[0] + 0.8).abs() < 1e-12);
        let f = GridFunction::from_fn(e, 1, |y, o| o[0] = y[0]);
        let r = f.restrict(&g).unwrap();
        for i in 0..g.num_nodes() {
            assert!((r.node_value(i)[0] - g.node(i)[0]).abs() < 1e-12);
        }
        let fine = g.refined();
        assert_eq!(fine.points[0], 21);
        assert_eq!(node_offsets(&fine, &g).unwrap(), vec![(0, 2)]);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BoxDomain::new(vec![], vec![]).is_err());
        assert!(GridDomain::interval(1.0, 1.0, 3).is_err());
        assert!(GridDomain::interval(0.0, 1.0, 1).is_err());
    }
}
