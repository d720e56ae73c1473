//! Chebyshev tensor interpolation, the variable-order rank schedule and
//! transfer matrices.
//!
//! Orders are stored as point counts `k` per direction; a degree-`m`
//! interpolation operator has `k = m + 1` points.

use crate::geometry::{BoundingBox, Point};
use crate::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// `k` Chebyshev points of the first kind mapped to `[a, b]`, ascending.
pub fn cheb_points(k: usize, a: f64, b: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("interpolation order must be positive".into()));
    }
    if a > b {
        return Err(Error::InvalidArgument(format!("empty interval [{a}, {b}]")));
    }
    Ok((0..k)
        .rev()
        .map(|i| {
            let x = (PI * (2 * i + 1) as f64 / (2 * k) as f64).cos();
            0.5 * (a + b) + 0.5 * (b - a) * x
        })
        .collect())
}

/// One-dimensional interpolation grid with barycentric weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid1d {
    pub a: f64,
    pub b: f64,
    pub points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid1d {
    pub fn chebyshev(k: usize, a: f64, b: f64) -> Result<Self> {
        Self::from_points(cheb_points(k, a, b)?, a, b)
    }

    /// Grid on arbitrary distinct points inside `[a, b]`.
    pub fn from_points(points: Vec<f64>, a: f64, b: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one point".into()));
        }
        // Weights are formed on the reference interval to keep them O(1).
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        let scale = if half > 0.0 { half } else { 1.0 };
        let r: Vec<f64> = points.iter().map(|x| (x - mid) / scale).collect();
        let mut weights = Vec::with_capacity(r.len());
        for j in 0..r.len() {
            let mut w = 1.0;
            for i in 0..r.len() {
                if i != j {
                    let diff = r[j] - r[i];
                    if diff == 0.0 {
                        return Err(Error::DuplicatePoints);
                    }
                    w *= diff;
                }
            }
            weights.push(1.0 / w);
        }
        Ok(Grid1d { a, b, points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Values of all Lagrange basis polynomials at `x`.
    pub fn lagrange(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.lagrange_into(x, &mut out);
        out
    }

    pub fn lagrange_into(&self, x: f64, out: &mut [f64]) {
        if let Some(j) = self.points.iter().position(|&p| p == x) {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[j] = 1.0;
            return;
        }
        let (mid, half) = (0.5 * (self.a + self.b), 0.5 * (self.b - self.a));
        let scale = if half > 0.0 { half } else { 1.0 };
        let xr = (x - mid) / scale;
        let mut sum = 0.0;
        for (j, (&p, &w)) in self.points.iter().zip(&self.weights).enumerate() {
            let c = w / (xr - (p - mid) / scale);
            out[j] = c;
            sum += c;
        }
        out.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Tensor Chebyshev grid on a box; axis 0 varies fastest in the flat index.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorGrid {
    pub axes: Vec<Grid1d>,
    pub order: usize,
}

impl TensorGrid {
    /// Grid of `k` points per direction on `bbox`. Axes of vanishing width are
    /// padded so that the grid stays unisolvent.
    pub fn new(bbox: &BoundingBox, k: usize) -> Result<Self> {
        let diam = bbox.diam_inf();
        let pad = if diam > 0.0 { 0.5 * diam } else { 1.0 };
        let axes = (0..bbox.dim())
            .map(|ax| {
                let (mut a, mut b) = (bbox.lo[ax], bbox.hi[ax]);
                if b - a <= 1e-10 * diam.max(f64::MIN_POSITIVE) {
                    let c = 0.5 * (a + b);
                    a = c - 0.5 * pad;
                    b = c + 0.5 * pad;
                }
                Grid1d::chebyshev(k, a, b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TensorGrid { axes, order: k })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.order.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multi-index of the flat index `i`.
    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.dim());
        for _ in 0..self.dim() {
            idx.push(i % self.order);
            i /= self.order;
        }
        idx
    }

    pub fn point(&self, i: usize) -> Point {
        let mut p = [0.0; 3];
        for (ax, j) in self.multi_index(i).into_iter().enumerate() {
            p[ax] = self.axes[ax].points[j];
        }
        p
    }

    pub fn points(&self) -> Vec<Point> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Values of all tensor Lagrange polynomials at `x`.
    pub fn lagrange(&self, x: &Point) -> Vec<f64> {
        let mut out = vec![1.0];
        for (ax, g) in self.axes.iter().enumerate() {
            let w = g.lagrange(x[ax]);
            let mut next = Vec::with_capacity(out.len() * w.len());
            for wj in &w {
                next.extend(out.iter().map(|v| v * wj));
            }
            out = next;
        }
        out
    }

    /// Interpolant of `f` evaluated at `x`.
    pub fn interpolate(&self, f: &dyn Fn(&Point) -> f64, x: &Point) -> f64 {
        let w = self.lagrange(x);
        (0..self.len()).map(|i| w[i] * f(&self.point(i))).sum()
    }
}

/// Interpolation weights of `x` for `grid`: `p(x) = Σ w_i p(ξ_i)`.
pub fn lagrange_eval(grid: &TensorGrid, x: &Point) -> Vec<f64> {
    grid.lagrange(x)
}

/// Matrix `E[i][j] = L^parent_j(ξ^child_i)` mapping parent nodal values to
/// child nodal values of the interpolant.
pub fn transfer_matrix(parent: &TensorGrid, child: &TensorGrid) -> DMatrix<f64> {
    assert_eq!(parent.dim(), child.dim());
    let mut e = DMatrix::from_element(1, 1, 1.0);
    for ax in 0..parent.dim() {
        let (pa, ca) = (&parent.axes[ax], &child.axes[ax]);
        let m = DMatrix::from_fn(ca.len(), pa.len(), |_, _| 0.0);
        let mut m = m;
        for (i, &x) in ca.points.iter().enumerate() {
            let w = pa.lagrange(x);
            for j in 0..pa.len() {
                m[(i, j)] = w[j];
            }
        }
        // Axis 0 fastest: the new axis multiplies from the left.
        e = m.kronecker(&e);
    }
    e
}

/// Variable-order schedule `k_ℓ = ⌈(β + α(p − ℓ))^δ⌉` points per direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSchedule {
    pub alpha: u32,
    pub beta: u32,
    pub delta: f64,
    pub dim: usize,
    pub depth: usize,
}

impl RankSchedule {
    pub fn new(alpha: u32, beta: u32, delta: f64, dim: usize, depth: usize) -> Result<Self> {
        if beta == 0 {
            return Err(Error::InvalidArgument("beta must be positive".into()));
        }
        if !(delta >= 1.0) {
            return Err(Error::InvalidArgument(format!("delta must be at least 1, got {delta}")));
        }
        Ok(RankSchedule { alpha, beta, delta, dim, depth })
    }

    /// Points per direction for a cluster on tree level `level`.
    pub fn order(&self, level: usize) -> usize {
        let base = self.beta as f64 + self.alpha as f64 * self.depth.saturating_sub(level) as f64;
        ceil_pow(base, self.delta)
    }

    /// Points per direction of the constant-order family.
    pub fn constant_order(&self) -> usize {
        ceil_pow(self.beta as f64, self.delta)
    }

    /// `K = k^d` for a cluster on level `level`.
    pub fn rank(&self, level: usize) -> usize {
        self.order(level).pow(self.dim as u32)
    }

    pub fn with_depth(&self, depth: usize) -> Self {
        RankSchedule { depth, ..*self }
    }
}

/// `⌈b^δ⌉`, guarded against rounding when the power is an integer.
fn ceil_pow(b: f64, delta: f64) -> usize {
    let v = b.powf(delta);
    let r = v.round();
    let k = if (v - r).abs() <= 1e-9 * r.max(1.0) { r } else { v.ceil() };
    (k as usize).max(1)
}

/// Sup-norm tensor interpolation errors of `f` on `bbox` for each order in
/// `orders`, measured on a uniform sample grid with `samples` points per axis.
pub fn interp_error_decay(
    f: &dyn Fn(&Point) -> f64,
    bbox: &BoundingBox,
    orders: &[usize],
    samples: usize,
) -> Result<Vec<f64>> {
    let dim = bbox.dim();
    let n = samples.max(2);
    let total = n.pow(dim as u32);
    let pts: Vec<Point> = (0..total)
        .map(|mut i| {
            let mut p = [0.0; 3];
            for (ax, c) in p.iter_mut().enumerate().take(dim) {
                let j = i % n;
                i /= n;
                *c = bbox.lo[ax] + bbox.width(ax) * j as f64 / (n - 1) as f64;
            }
            p
        })
        .collect();
    let exact: Vec<f64> = pts.iter().map(f).collect();
    orders
        .iter()
        .map(|&k| {
            let grid = TensorGrid::new(bbox, k)?;
            let vals: Vec<f64> = grid.points().iter().map(f).collect();
            Ok(pts
                .iter()
                .zip(&exact)
                .map(|(x, fx)| {
                    let w = grid.lagrange(x);
                    let p: f64 = w.iter().zip(&vals).map(|(a, b)| a * b).sum();
                    (p - fx).abs()
                })
                .fold(0.0, f64::max))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_example() {
        let s = RankSchedule::new(1, 2, 1.5, 2, 3).unwrap();
        let orders: Vec<usize> = (0..=3).rev().map(|l| s.order(l)).collect();
        assert_eq!(orders, vec![3, 6, 8, 12]);
        assert_eq!(s.rank(3), 9);
        assert_eq!(s.constant_order(), 3);
    }

    #[test]
    fn integer_powers_do_not_round_up() {
        assert_eq!(ceil_pow(4.0, 1.5), 8);
        assert_eq!(ceil_pow(9.0, 1.5), 27);
        assert_eq!(ceil_pow(5.0, 1.0), 5);
    }
}
