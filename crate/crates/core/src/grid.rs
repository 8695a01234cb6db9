//! Uniform spatial mesh on an interval with homogeneous Dirichlet boundary.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Uniform mesh on `(x_lo, x_hi)` with `n_x` interior nodes.
///
/// Interior nodes sit at `x_j = x_lo + j·h`, `j = 1..=n_x`, with
/// `h = (x_hi - x_lo)/(n_x + 1)`. Vectors carry interior values only; the
/// boundary values at `j = 0` and `j = n_x + 1` are identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_x: usize,
    pub h: f64,
}

/// Interior nodal values of a mesh function (length `n_x`).
pub type GridVector = Vec<f64>;

impl Grid {
    pub fn new(x_lo: f64, x_hi: f64, n_x: usize) -> Result<Self> {
        if x_lo >= x_hi || !x_lo.is_finite() || !x_hi.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "need x_lo < x_hi, got [{x_lo}, {x_hi}]"
            )));
        }
        if n_x < 2 {
            return Err(Error::InvalidGrid(format!("need n_x ≥ 2, got {n_x}")));
        }
        let h = (x_hi - x_lo) / (n_x as f64 + 1.0);
        Ok(Grid { x_lo, x_hi, n_x, h })
    }

    /// Coordinate of interior node `j ∈ 1..=n_x`.
    #[inline]
    pub fn node(&self, j: usize) -> f64 {
        self.x_lo + j as f64 * self.h
    }

    /// Midpoint of edge `e ∈ 0..=n_x` (edge `e` joins nodes `e` and `e+1`,
    /// counting the boundary as nodes `0` and `n_x+1`).
    #[inline]
    pub fn edge_midpoint(&self, e: usize) -> f64 {
        self.x_lo + (e as f64 + 0.5) * self.h
    }

    /// Number of edges (`n_x + 1`).
    #[inline]
    pub fn n_edges(&self) -> usize {
        self.n_x + 1
    }

    /// Sample a function of `x` at every interior node.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> GridVector {
        (1..=self.n_x).map(|j| f(self.node(j))).collect()
    }

    /// Sample a function of `x` at every edge midpoint.
    pub fn sample_edges(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..=self.n_x).map(|e| f(self.edge_midpoint(e))).collect()
    }

    /// Normalized coordinate in `[0, 1]` for a point of the interval.
    #[inline]
    pub fn unit_coord(&self, x: f64) -> f64 {
        (x - self.x_lo) / (self.x_hi - self.x_lo)
    }

    pub(crate) fn check_len(&self, v: &[f64], what: &'static str) -> Result<()> {
        if v.len() != self.n_x {
            return Err(Error::ShapeMismatch { expected: self.n_x, got: v.len(), what });
        }
        Ok(())
    }
}
