//! Assembly of the 1-D operators on the interior mesh, per time slot and
//! tree node.
//!
//! The divergence-form operator `A v = (b v)'' − (f v)' + λ v` is assembled
//! through the Leibniz split `(b v)'' = (b v')' + (b' v)'`, i.e. as
//!
//! ```text
//! A_h = S_b − T_{f − b'} + diag(λ)
//! ```
//!
//! with the conservative stiffness part
//!
//! ```text
//! (S_b v)_j = [ b_{j+1/2}(v_{j+1} − v_j) − b_{j-1/2}(v_j − v_{j-1}) ] / h²
//! ```
//!
//! (`b` sampled at edge midpoints) and the conservative transport part
//!
//! ```text
//! (T_g v)_j = [ g_{j+1/2}(v_j + v_{j+1})/2 − g_{j-1/2}(v_{j-1} + v_j)/2 ] / h
//! ```
//!
//! (`g` at edge midpoints, centered averaging). Dirichlet boundary values
//! enter as zeros, i.e. the first/last couplings are dropped.
//!
//! Why this split: `S_b` is symmetric, so `−⟨S_b v, v⟩_{H0,h}` is exactly the
//! weighted gradient form `h Σ_e b_e ((Dv)_e)²`, and the literal transpose
//! `A_hᵀ` is a consistent discretization of the non-divergence adjoint
//! `A* u = b u'' + f u' + λ u`. The adjoint is therefore *defined* as the
//! transpose (bit-exact duality); a direct non-divergence stencil is kept
//! only as a consistency cross-check, which it passes at O(h) for Lipschitz
//! and O(h²) for smooth coefficients.
//!
//! The noise operators are already in conservative form:
//! `B_i v = −(β_i v)' + β̄_i v = −T_{β_i} + diag(β̄_i)`, and
//! `B_i* := B_iᵀ` consistently discretizes `β_i u' + β̄_i u`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::coeffs::{SampleCtx, SpdeCoefficients};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::TriDiag;
use crate::tree::NoiseTree;

/// Assembly factory bound to one (coefficients, grid, tree) triple.
pub struct OperatorAssembly<'a> {
    pub coeffs: &'a dyn SpdeCoefficients,
    pub grid: &'a Grid,
    pub tree: &'a NoiseTree,
}

impl<'a> OperatorAssembly<'a> {
    pub fn new(coeffs: &'a dyn SpdeCoefficients, grid: &'a Grid, tree: &'a NoiseTree) -> Self {
        OperatorAssembly { coeffs, grid, tree }
    }

    fn ctx(&self, level: usize, node: usize) -> SampleCtx<'_> {
        SampleCtx {
            level,
            node,
            t: self.tree.time(level),
            w: self.tree.w_values(level, node),
        }
    }

    /// `b` sampled at the `n_x + 1` edge midpoints (also the weight vector of
    /// the weighted gradient norm at this slot/node).
    pub fn edge_diffusion(&self, level: usize, node: usize) -> Vec<f64> {
        let ctx = self.ctx(level, node);
        self.grid.sample_edges(|x| self.coeffs.diffusion(x, &ctx))
    }

    /// Stiffness part `S_b` alone (symmetric; its negated quadratic form is
    /// exactly the weighted gradient form).
    pub fn stiffness_part(&self, level: usize, node: usize) -> TriDiag {
        let ctx = self.ctx(level, node);
        let n = self.grid.n_x;
        let inv_h2 = 1.0 / (self.grid.h * self.grid.h);
        let mut a = TriDiag::zeros(n);
        let b_edge: Vec<f64> =
            self.grid.sample_edges(|x| self.coeffs.diffusion(x, &ctx));
        for j in 0..n {
            let b_left = b_edge[j];
            let b_right = b_edge[j + 1];
            a.diag[j] -= (b_left + b_right) * inv_h2;
            if j > 0 {
                a.sub[j - 1] += b_left * inv_h2;
            }
            if j + 1 < n {
                a.sup[j] += b_right * inv_h2;
            }
        }
        a
    }

    /// Conservative transport `T_g` for edge samples `g`.
    fn transport(&self, g_edge: &[f64]) -> TriDiag {
        let n = self.grid.n_x;
        let inv_2h = 0.5 / self.grid.h;
        let mut t = TriDiag::zeros(n);
        for j in 0..n {
            let g_left = g_edge[j];
            let g_right = g_edge[j + 1];
            t.diag[j] += (g_right - g_left) * inv_2h;
            if j > 0 {
                t.sub[j - 1] -= g_left * inv_2h;
            }
            if j + 1 < n {
                t.sup[j] += g_right * inv_2h;
            }
        }
        t
    }

    /// Full `A_h` at one slot/node.
    pub fn assemble_a(&self, level: usize, node: usize) -> TriDiag {
        let ctx = self.ctx(level, node);
        let mut a = self.stiffness_part(level, node);
        // Effective edge drift f − ∂b/∂x carries the Leibniz term of (b v)''.
        let g: Vec<f64> = self
            .grid
            .sample_edges(|x| self.coeffs.drift(x, &ctx) - self.coeffs.diffusion_dx(x, &ctx));
        let t = self.transport(&g);
        a.add_scaled(-1.0, &t);
        for j in 0..self.grid.n_x {
            a.diag[j] += self.coeffs.reaction(self.grid.node(j + 1), &ctx);
        }
        a
    }

    /// `A*` as the literal transpose of [`Self::assemble_a`] (bit-exact
    /// band swap; the canonical adjoint).
    pub fn assemble_a_star(&self, level: usize, node: usize) -> TriDiag {
        self.assemble_a(level, node).transpose()
    }

    /// Direct non-divergence stencil `b_j D₂ + f_j D₁ + λ_j` with node
    /// sampling — consistency cross-check only, not the adjoint used by the
    /// solvers.
    pub fn assemble_a_star_direct(&self, level: usize, node: usize) -> TriDiag {
        let ctx = self.ctx(level, node);
        let n = self.grid.n_x;
        let inv_h2 = 1.0 / (self.grid.h * self.grid.h);
        let inv_2h = 0.5 / self.grid.h;
        let mut a = TriDiag::zeros(n);
        for j in 0..n {
            let x = self.grid.node(j + 1);
            let b = self.coeffs.diffusion(x, &ctx);
            let f = self.coeffs.drift(x, &ctx);
            let lam = self.coeffs.reaction(x, &ctx);
            a.diag[j] += -2.0 * b * inv_h2 + lam;
            if j > 0 {
                a.sub[j - 1] += b * inv_h2 - f * inv_2h;
            }
            if j + 1 < n {
                a.sup[j] += b * inv_h2 + f * inv_2h;
            }
        }
        a
    }

    /// `B_i = −T_{β_i} + diag(β̄_i)` at one slot/node.
    pub fn assemble_b(&self, i: usize, level: usize, node: usize) -> Result<TriDiag> {
        if i >= self.coeffs.n_noise() {
            return Err(Error::Invalid(alloc::format!(
                "noise operator index {i} out of range (< {})",
                self.coeffs.n_noise()
            )));
        }
        let ctx = self.ctx(level, node);
        let beta: Vec<f64> =
            self.grid.sample_edges(|x| self.coeffs.noise_transport(i, x, &ctx));
        let mut b = self.transport(&beta);
        for d in b.diag.iter_mut() {
            *d = -*d;
        }
        for v in b.sub.iter_mut() {
            *v = -*v;
        }
        for v in b.sup.iter_mut() {
            *v = -*v;
        }
        for j in 0..self.grid.n_x {
            b.diag[j] += self.coeffs.noise_reaction(i, self.grid.node(j + 1), &ctx);
        }
        Ok(b)
    }

    /// `B_i*` as the literal transpose.
    pub fn assemble_b_star(&self, i: usize, level: usize, node: usize) -> Result<TriDiag> {
        Ok(self.assemble_b(i, level, node)?.transpose())
    }
}

/// CSV triplet dump (`row,col,value`) of a tridiagonal matrix, for debugging.
pub fn matrix_to_csv(a: &TriDiag) -> String {
    let mut out = String::from("row,col,value\n");
    let n = a.order();
    for i in 0..n {
        if i > 0 {
            let _ = writeln!(out, "{},{},{}", i, i - 1, a.sub[i - 1]);
        }
        let _ = writeln!(out, "{},{},{}", i, i, a.diag[i]);
        if i + 1 < n {
            let _ = writeln!(out, "{},{},{}", i, i + 1, a.sup[i]);
        }
    }
    out
}
