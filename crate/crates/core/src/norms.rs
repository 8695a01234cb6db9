//! Discrete Sobolev norms on the mesh and space-time norms over the tree.
//!
//! Spatial norms use the plain interior scaling `h·Σ` and one-sided edge
//! differences with the Dirichlet zeros at both boundary slots:
//!
//! ```text
//! ‖v‖²_{H0}      = h Σ_j v_j²
//! |v|²_{H1}      = h Σ_{e=0..n_x} ((v_{e+1} - v_e)/h)²          (v_0 = v_{n_x+1} = 0)
//! ‖v‖²_{H1}      = ‖v‖²_{H0} + |v|²_{H1}
//! ‖v‖²_{H2}      = ‖v‖²_{H1} + h Σ_j ((v_{j+1} - 2v_j + v_{j-1})/h²)²
//! ‖v‖²_{H-1}     = h·vᵀ(-Δ_h)⁻¹v     with Δ_h the Dirichlet second difference
//! ```
//!
//! The `H⁻¹` form realizes the duality supremum exactly in the discrete
//! space: the maximizing test function of `sup ⟨v,φ⟩/|φ|_{H1}` is the
//! discrete solution of `-Δ_h φ = v`.
//!
//! Space-time norms take the exact tree expectation per level:
//!
//! ```text
//! ‖u‖_{Xᵏ}² = Σ_{k=0}^{M-1} Δt · E ‖u(t_k)‖²_{Hᵏ}       (left endpoints)
//! ‖u‖_{Cᵏ}  = max_{k=0..M} (E ‖u(t_k)‖²_{Hᵏ})^{1/2}
//! ‖u‖_{Yᵏ}  = ‖u‖_{Xᵏ} + ‖u‖_{Cᵏ⁻¹}
//! ‖Ψ‖_{Zᵏ}  = (E ‖Ψ‖²_{Hᵏ})^{1/2}                        (one level)
//! ```

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::TriDiag;
use crate::tree::{AdaptedField, NoiseTree, Slice};

/// The discrete Sobolev scales. `WeightedH1` needs coefficient samples and is
/// served by [`weighted_h1_seminorm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    HMinus1,
    H0,
    H1,
    H2,
    WeightedH1,
}

impl NormKind {
    /// The `k` in `Hᵏ` for the unweighted scales.
    pub fn order(self) -> Option<i32> {
        match self {
            NormKind::HMinus1 => Some(-1),
            NormKind::H0 => Some(0),
            NormKind::H1 => Some(1),
            NormKind::H2 => Some(2),
            NormKind::WeightedH1 => None,
        }
    }

    pub fn from_order(k: i32) -> Result<Self> {
        match k {
            -1 => Ok(NormKind::HMinus1),
            0 => Ok(NormKind::H0),
            1 => Ok(NormKind::H1),
            2 => Ok(NormKind::H2),
            _ => Err(Error::Invalid(alloc::format!("unsupported Sobolev order k = {k}"))),
        }
    }
}

/// `⟨u, v⟩_{H0,h} = h Σ u_j v_j`.
pub fn h0_inner(grid: &Grid, u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut s = 0.0;
    for i in 0..u.len() {
        s += u[i] * v[i];
    }
    grid.h * s
}

pub fn h0_norm_sq(grid: &Grid, v: &[f64]) -> f64 {
    h0_inner(grid, v, v)
}

/// `|v|²_{H1}`: edge differences against the boundary zeros.
pub fn h1_seminorm_sq(grid: &Grid, v: &[f64]) -> f64 {
    let n = v.len();
    let inv_h = 1.0 / grid.h;
    let mut s = 0.0;
    let mut prev = 0.0;
    for &x in v.iter() {
        let d = (x - prev) * inv_h;
        s += d * d;
        prev = x;
    }
    let d = (0.0 - v[n - 1]) * inv_h;
    s += d * d;
    grid.h * s
}

fn h2_seminorm_sq(grid: &Grid, v: &[f64]) -> f64 {
    let n = v.len();
    let inv_h2 = 1.0 / (grid.h * grid.h);
    let mut s = 0.0;
    for j in 0..n {
        let left = if j == 0 { 0.0 } else { v[j - 1] };
        let right = if j + 1 == n { 0.0 } else { v[j + 1] };
        let d2 = (right - 2.0 * v[j] + left) * inv_h2;
        s += d2 * d2;
    }
    grid.h * s
}

/// Dirichlet second-difference matrix `-Δ_h` (SPD, tridiagonal).
pub fn neg_laplacian(grid: &Grid) -> TriDiag {
    let n = grid.n_x;
    let inv_h2 = 1.0 / (grid.h * grid.h);
    let mut a = TriDiag::zeros(n);
    for i in 0..n {
        a.diag[i] = 2.0 * inv_h2;
    }
    for i in 0..n - 1 {
        a.sub[i] = -inv_h2;
        a.sup[i] = -inv_h2;
    }
    a
}

pub fn h_minus1_norm_sq(grid: &Grid, v: &[f64]) -> f64 {
    let a = neg_laplacian(grid);
    let mut w = v.to_vec();
    let ok = a.solve_in_place(&mut w);
    debug_assert!(ok, "the Dirichlet Laplacian is SPD");
    let mut s = 0.0;
    for i in 0..v.len() {
        s += v[i] * w[i];
    }
    // Roundoff can push a tiny quadratic form below zero.
    (grid.h * s).max(0.0)
}

/// Discrete norm of one grid vector.
pub fn discrete_norm(grid: &Grid, v: &[f64], kind: NormKind) -> Result<f64> {
    grid.check_len(v, "discrete_norm input")?;
    let sq = match kind {
        NormKind::H0 => h0_norm_sq(grid, v),
        NormKind::H1 => h0_norm_sq(grid, v) + h1_seminorm_sq(grid, v),
        NormKind::H2 => h0_norm_sq(grid, v) + h1_seminorm_sq(grid, v) + h2_seminorm_sq(grid, v),
        NormKind::HMinus1 => h_minus1_norm_sq(grid, v),
        NormKind::WeightedH1 => return Err(Error::WeightRequired),
    };
    Ok(libm::sqrt(sq))
}

fn norm_sq_of_order(grid: &Grid, v: &[f64], k: i32) -> Result<f64> {
    Ok(match k {
        0 => h0_norm_sq(grid, v),
        1 => h0_norm_sq(grid, v) + h1_seminorm_sq(grid, v),
        2 => h0_norm_sq(grid, v) + h1_seminorm_sq(grid, v) + h2_seminorm_sq(grid, v),
        -1 => h_minus1_norm_sq(grid, v),
        _ => return Err(Error::Invalid(alloc::format!("unsupported Sobolev order k = {k}"))),
    })
}

/// Weighted gradient seminorm `(h Σ_e b_e ((v_{e+1}-v_e)/h)²)^{1/2}` with the
/// weight sampled at the `n_x + 1` edge midpoints (forward differences on
/// cell edges). With this convention the square of the seminorm is exactly
/// the negated quadratic form of the assembled stiffness part of `A`.
pub fn weighted_h1_seminorm(grid: &Grid, v: &[f64], b_edges: &[f64]) -> Result<f64> {
    grid.check_len(v, "weighted_h1_seminorm input")?;
    if b_edges.len() != grid.n_edges() {
        return Err(Error::ShapeMismatch {
            expected: grid.n_edges(),
            got: b_edges.len(),
            what: "edge weight samples",
        });
    }
    for (i, &b) in b_edges.iter().enumerate() {
        if !b.is_finite() || b <= 0.0 {
            return Err(Error::NonPositiveWeight { index: i, value: b });
        }
    }
    let n = v.len();
    let inv_h = 1.0 / grid.h;
    let mut s = 0.0;
    let mut prev = 0.0;
    for (e, &x) in v.iter().enumerate() {
        let d = (x - prev) * inv_h;
        s += b_edges[e] * d * d;
        prev = x;
    }
    let d = (0.0 - v[n - 1]) * inv_h;
    s += b_edges[n] * d * d;
    Ok(libm::sqrt(grid.h * s))
}

/// `E ‖slice‖²_{Hᵏ}` with the exact (uniform) node probabilities.
pub fn expected_norm_sq(grid: &Grid, slice: &Slice, k: i32) -> Result<f64> {
    let n_nodes = slice.n_nodes();
    let p = 1.0 / n_nodes as f64;
    let mut s = 0.0;
    for node in 0..n_nodes {
        s += norm_sq_of_order(grid, slice.node(node), k)?;
    }
    Ok(p * s)
}

/// `Zᵏ` norm of one slice: `(E‖·‖²_{Hᵏ})^{1/2}`.
pub fn z_norm(grid: &Grid, slice: &Slice, k: i32) -> Result<f64> {
    Ok(libm::sqrt(expected_norm_sq(grid, slice, k)?))
}

/// `Xᵏ` norm of an adapted field: left-endpoint sum over levels `0..M`.
pub fn x_norm(tree: &NoiseTree, grid: &Grid, field: &AdaptedField, k: i32) -> Result<f64> {
    field.check_shape(tree, grid.n_x)?;
    let mut s = 0.0;
    for level in 0..tree.n_steps {
        let slice = Slice { level, n_x: field.n_x, data: field.levels[level].clone() };
        s += tree.dt * expected_norm_sq(grid, &slice, k)?;
    }
    Ok(libm::sqrt(s))
}

/// `Cᵏ` norm: max over all levels of `(E‖·‖²_{Hᵏ})^{1/2}`.
pub fn c_norm(tree: &NoiseTree, grid: &Grid, field: &AdaptedField, k: i32) -> Result<f64> {
    field.check_shape(tree, grid.n_x)?;
    let mut m: f64 = 0.0;
    for level in 0..=tree.n_steps {
        let slice = Slice { level, n_x: field.n_x, data: field.levels[level].clone() };
        m = m.max(expected_norm_sq(grid, &slice, k)?);
    }
    Ok(libm::sqrt(m))
}

/// `Yᵏ = Xᵏ + Cᵏ⁻¹` (identity by construction; kept as one call site).
pub fn y_norm(tree: &NoiseTree, grid: &Grid, field: &AdaptedField, k: i32) -> Result<f64> {
    Ok(x_norm(tree, grid, field, k)? + c_norm(tree, grid, field, k - 1)?)
}

/// Discrete duality pairing `Σ_k Δt E⟨a_k, b_k⟩_{H0,h}` over levels `0..M`
/// (the `X⁰` inner product used by the adjoint identities).
pub fn x0_inner(tree: &NoiseTree, grid: &Grid, a: &AdaptedField, b: &AdaptedField) -> f64 {
    let mut s = 0.0;
    for level in 0..tree.n_steps {
        let p = tree.node_probability(level);
        let mut lvl = 0.0;
        for node in 0..tree.nodes_at(level) {
            let u = a.value(level, node);
            let v = b.value(level, node);
            let mut acc = 0.0;
            for j in 0..u.len() {
                acc += u[j] * v[j];
            }
            lvl += p * acc;
        }
        s += tree.dt * grid.h * lvl;
    }
    s
}

/// `E⟨a, b⟩_{H0,h}` for two slices on the same level.
pub fn slice_inner(grid: &Grid, a: &Slice, b: &Slice) -> f64 {
    debug_assert_eq!(a.level, b.level);
    let n_nodes = a.n_nodes();
    let p = 1.0 / n_nodes as f64;
    let mut s = 0.0;
    for node in 0..n_nodes {
        let u = a.node(node);
        let v = b.node(node);
        let mut acc = 0.0;
        for j in 0..u.len() {
            acc += u[j] * v[j];
        }
        s += p * acc;
    }
    grid.h * s
}

pub fn x0_norm(tree: &NoiseTree, grid: &Grid, a: &AdaptedField) -> f64 {
    libm::sqrt(x0_inner(tree, grid, a, a).max(0.0))
}

/// Max over levels and nodes of the `H0` norm gap between two fields
/// (the `C⁰`-style distance used by cross-solver comparisons).
pub fn c0_distance(tree: &NoiseTree, grid: &Grid, a: &AdaptedField, b: &AdaptedField) -> f64 {
    let mut m: f64 = 0.0;
    for level in 0..=tree.n_steps {
        for node in 0..tree.nodes_at(level) {
            let u = a.value(level, node);
            let v = b.value(level, node);
            let mut acc = 0.0;
            for j in 0..u.len() {
                let d = u[j] - v[j];
                acc += d * d;
            }
            m = m.max(grid.h * acc);
        }
    }
    libm::sqrt(m)
}
