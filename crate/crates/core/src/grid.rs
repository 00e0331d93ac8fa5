//! Uniform time grids and grid-sampled coefficient series.
//!
//! Every time-varying quantity is stored as node samples and read back by
//! piecewise-linear interpolation. A series with a single sample is
//! constant in time.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t0 + m * dt`, `m = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && horizon.is_finite()) || horizon <= t0 {
            return Err(Error::InvalidArgument(format!(
                "grid requires finite t0 < T, got t0={t0}, T={horizon}"
            )));
        }
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid requires at least 2 steps, got {steps}"
            )));
        }
        Ok(Self { t0, horizon, steps })
    }

    /// The grid with every step halved.
    pub fn refined(&self) -> Self {
        Self {
            steps: 2 * self.steps,
            ..*self
        }
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.steps as f64
    }

    pub fn node(&self, m: usize) -> f64 {
        if m == self.steps {
            self.horizon
        } else {
            self.t0 + m as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|m| self.node(m)).collect()
    }

    /// Trapezoidal quadrature weight of node `m`.
    pub fn trapezoid_weight(&self, m: usize) -> f64 {
        if m == 0 || m == self.steps {
            0.5 * self.dt()
        } else {
            self.dt()
        }
    }

    /// Locate `t` as `(m, u)` with `t = node(m) + u * dt`, `u` in `[0, 1]`
    /// and `m < steps`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let tol = 1e-12 * (1.0 + self.horizon.abs());
        if !(t >= self.t0 - tol && t <= self.horizon + tol) {
            return Err(Error::OutOfRange {
                t,
                t0: self.t0,
                t1: self.horizon,
            });
        }
        let s = ((t - self.t0) / self.dt()).clamp(0.0, self.steps as f64);
        let m = (s.floor() as usize).min(self.steps - 1);
        // Nodes map to exact fractions so interpolation reproduces samples.
        if t == self.node(m + 1) {
            return Ok((m, 1.0));
        }
        if t == self.node(m) {
            return Ok((m, 0.0));
        }
        Ok((m, (s - m as f64).clamp(0.0, 1.0)))
    }

    /// Index of the node equal to `t`, if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let (m, u) = self.locate(t).ok()?;
        let tol = 1e-9;
        if u < tol {
            Some(m)
        } else if u > 1.0 - tol {
            Some(m + 1)
        } else {
            None
        }
    }
}

/// Grid-sampled matrix-valued function of time.
///
/// Holds either one sample (constant) or one sample per grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MatrixSeries {
    samples: Vec<DMatrix<f64>>,
}

impl MatrixSeries {
    pub fn constant(m: DMatrix<f64>) -> Self {
        Self { samples: vec![m] }
    }

    pub fn from_samples(samples: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Dimension("empty matrix series".into()))?;
        let shape = first.shape();
        if samples.iter().any(|s| s.shape() != shape) {
            return Err(Error::Dimension(
                "matrix series samples have inconsistent shapes".into(),
            ));
        }
        Ok(Self { samples })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(DMatrix::zeros(rows, cols))
    }

    /// Sample `f(t_m)` at every node of `grid`.
    pub fn sample(grid: &TimeGrid, mut f: impl FnMut(f64) -> DMatrix<f64>) -> Result<Self> {
        Self::from_samples(grid.nodes().into_iter().map(&mut f).collect())
    }

    pub fn is_constant(&self) -> bool {
        self.samples.len() == 1
    }

    pub fn samples(&self) -> &[DMatrix<f64>] {
        &self.samples
    }

    pub fn shape(&self) -> (usize, usize) {
        self.samples[0].shape()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Whether the series is compatible with a grid of `nodes` nodes.
    pub fn fits(&self, nodes: usize) -> bool {
        self.samples.len() == 1 || self.samples.len() == nodes
    }

    pub fn node(&self, m: usize) -> &DMatrix<f64> {
        if self.samples.len() == 1 {
            &self.samples[0]
        } else {
            &self.samples[m]
        }
    }

    /// Value halfway between nodes `m` and `m + 1`.
    pub fn mid(&self, m: usize) -> DMatrix<f64> {
        if self.samples.len() == 1 {
            self.samples[0].clone()
        } else {
            (&self.samples[m] + &self.samples[m + 1]) * 0.5
        }
    }

    /// Value at fractional position `u` in `[node(m), node(m + 1)]`.
    pub fn lerp(&self, m: usize, u: f64) -> DMatrix<f64> {
        if self.samples.len() == 1 {
            self.samples[0].clone()
        } else {
            &self.samples[m] * (1.0 - u) + &self.samples[m + 1] * u
        }
    }

    pub fn at(&self, grid: &TimeGrid, t: f64) -> Result<DMatrix<f64>> {
        let (m, u) = grid.locate(t)?;
        Ok(self.lerp(m, u))
    }

    /// Samples on the grid with every step halved; new nodes take the
    /// interpolated midpoint values.
    pub fn refined(&self) -> Self {
        if self.is_constant() {
            return self.clone();
        }
        let n = self.samples.len();
        let mut samples = Vec::with_capacity(2 * n - 1);
        for m in 0..n - 1 {
            samples.push(self.samples[m].clone());
            samples.push(self.mid(m));
        }
        samples.push(self.samples[n - 1].clone());
        Self { samples }
    }

    /// Expand to one sample per node.
    pub fn expanded(&self, nodes: usize) -> Self {
        if self.samples.len() == nodes {
            self.clone()
        } else {
            Self {
                samples: vec![self.samples[0].clone(); nodes],
            }
        }
    }

    pub fn map(&self, f: impl FnMut(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        Self {
            samples: self.samples.iter().map(f).collect(),
        }
    }

    /// Node-wise combination of two series on a grid of `nodes` nodes.
    pub fn zip_with(
        &self,
        other: &Self,
        nodes: usize,
        mut f: impl FnMut(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
    ) -> Self {
        if self.is_constant() && other.is_constant() {
            return Self::constant(f(&self.samples[0], &other.samples[0]));
        }
        Self {
            samples: (0..nodes).map(|m| f(self.node(m), other.node(m))).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|m| m * s)
    }

    pub fn all_finite(&self) -> bool {
        self.samples.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute entry over all samples.
    pub fn sup_norm(&self) -> f64 {
        self.samples
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0_f64, |a, v| a.max(v.abs()))
    }
}

/// Grid-sampled scalar function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalarSeries {
    samples: Vec<f64>,
}

impl ScalarSeries {
    pub fn constant(v: f64) -> Self {
        Self { samples: vec![v] }
    }

    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dimension("empty scalar series".into()));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn is_constant(&self) -> bool {
        self.samples.len() == 1
    }

    pub fn fits(&self, nodes: usize) -> bool {
        self.samples.len() == 1 || self.samples.len() == nodes
    }

    pub fn node(&self, m: usize) -> f64 {
        if self.samples.len() == 1 {
            self.samples[0]
        } else {
            self.samples[m]
        }
    }

    pub fn at(&self, grid: &TimeGrid, t: f64) -> Result<f64> {
        let (m, u) = grid.locate(t)?;
        Ok(if self.samples.len() == 1 {
            self.samples[0]
        } else {
            self.samples[m] * (1.0 - u) + self.samples[m + 1] * u
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, f64::NAN, 10).is_err());
    }

    #[test]
    fn nodes_are_strictly_increasing_and_end_at_horizon() {
        let g = TimeGrid::new(0.3, 1.7, 7).unwrap();
        let n = g.nodes();
        assert_eq!(n.len(), 8);
        assert!(n.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(n[7], 1.7);
        assert_eq!(n[0], 0.3);
    }

    #[test]
    fn interpolation_is_exact_at_nodes() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let s = MatrixSeries::sample(&g, |t| DMatrix::from_element(1, 2, t * t)).unwrap();
        for m in 0..=4 {
            assert_eq!(s.at(&g, g.node(m)).unwrap(), *s.node(m));
        }
        let mid = s.at(&g, 0.125).unwrap();
        assert!((mid[0] - 0.5 * (0.0 + 0.0625)).abs() < 1e-15);
        assert!(s.at(&g, 1.5).is_err());
    }

    #[test]
    fn node_index_finds_nodes_only() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert_eq!(g.node_index(0.3), Some(3));
        assert_eq!(g.node_index(1.0), Some(10));
        assert_eq!(g.node_index(0.35), None);
    }
}
