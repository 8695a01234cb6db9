//! Desk-scale laboratory for linear parabolic Ito equations on an interval
//! with Dirichlet boundary, driven by an exact finite noise tree.
//!
//! The continuum objects live in a cylinder `(x_lo, x_hi) × [0, T]`:
//!
//! ```text
//! forward:   d_t u = (A u + φ) dt + Σ_i (B_i u + h_i) dw_i(t),   u(s) = Φ
//! backward:  d_t p + (A* p + Σ_i B_i* χ_i + ξ) dt = Σ_i χ_i dw_i(t),   p(T) = Ψ
//! ```
//!
//! with `A v = (b v)'' - (f v)' + λ v`, `B_i v = -(β_i v)' + β̄_i v` and their
//! formal adjoints `A* u = b u'' + f u' + λ u`, `B_i* u = β_i u' + β̄_i u`.
//! Everything here is discretized so that the structural identities of that
//! pair — adjoint duality, operator decomposition through the B_i = 0 solution
//! maps, the semigroup property, martingale representation — hold as exact
//! finite-dimensional statements, checkable to near machine precision, while
//! the usual consistency orders with the continuum are kept as refinement
//! studies.
//!
//! * [`grid`] — uniform interior mesh and nodal vectors.
//! * [`norms`] — discrete Sobolev norms (H⁻¹, H⁰, H¹, H², weighted H¹) and the
//!   space-time norms over the tree (Xᵏ, Cᵏ, Yᵏ, Zᵏ).
//! * [`tree`] — the 2^N-ary noise tree: exact conditional expectations, Ito
//!   integrals, and martingale representation with its residual channel.
//! * [`coeffs`] — coefficient fields, presets, and eigenvalue certification of
//!   the coercivity conditions.
//! * [`operators`] — per (time slot, node) assembly of the tridiagonal `A`,
//!   bidiagonal `B_i`, and their exact transposes.
//! * [`forward`] — drift-implicit Euler–Maruyama sweep and the solution maps
//!   (full and with the noise operators switched off), plus their composite
//!   coupling operator.
//! * [`backward`] — three routes to the backward pair `(p, χ)`: exact adjoint
//!   sweep, dynamic-programming recursion, and Neumann iteration with a
//!   damping shift.
//! * [`verify`] — experiment harness turning the structural theory into
//!   recorded pass/fail or monitored checks.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod backward;
pub mod coeffs;
pub mod error;
pub mod forward;
pub mod grid;
pub mod linalg;
pub mod norms;
pub mod operators;
pub mod rng;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};
pub use grid::Grid;
pub use tree::{AdaptedField, NoiseTree, Slice};
