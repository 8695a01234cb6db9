//! Small dense kernels: tridiagonal systems and symmetric eigenvalues.
//!
//! Everything here is direct and deterministic — no pivot permutations, no
//! iterative refinement — so repeated runs are bit-identical.

use alloc::vec;
use alloc::vec::Vec;

/// Tridiagonal matrix of order `n`.
///
/// `sub[i] = a[i+1][i]` (length `n-1`), `diag[i] = a[i][i]` (length `n`),
/// `sup[i] = a[i][i+1]` (length `n-1`).
#[derive(Debug, Clone, PartialEq)]
pub struct TriDiag {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl TriDiag {
    pub fn zeros(n: usize) -> Self {
        TriDiag { sub: vec![0.0; n - 1], diag: vec![0.0; n], sup: vec![0.0; n - 1] }
    }

    pub fn identity(n: usize) -> Self {
        TriDiag { sub: vec![0.0; n - 1], diag: vec![1.0; n], sup: vec![0.0; n - 1] }
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.diag.len()
    }

    /// `out = A·v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.order();
        for i in 0..n {
            let mut s = self.diag[i] * v[i];
            if i > 0 {
                s += self.sub[i - 1] * v[i - 1];
            }
            if i + 1 < n {
                s += self.sup[i] * v[i + 1];
            }
            out[i] = s;
        }
    }

    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.order()];
        self.apply(v, &mut out);
        out
    }

    /// `out = Aᵀ·v` without materializing the transpose.
    pub fn apply_transpose(&self, v: &[f64], out: &mut [f64]) {
        let n = self.order();
        for i in 0..n {
            let mut s = self.diag[i] * v[i];
            if i > 0 {
                s += self.sup[i - 1] * v[i - 1];
            }
            if i + 1 < n {
                s += self.sub[i] * v[i + 1];
            }
            out[i] = s;
        }
    }

    /// Exact transpose (band swap — bitwise, no arithmetic).
    pub fn transpose(&self) -> TriDiag {
        TriDiag { sub: self.sup.clone(), diag: self.diag.clone(), sup: self.sub.clone() }
    }

    /// `I - dt·A`.
    pub fn identity_minus_scaled(&self, dt: f64) -> TriDiag {
        let n = self.order();
        let mut out = TriDiag::zeros(n);
        for i in 0..n {
            out.diag[i] = 1.0 - dt * self.diag[i];
        }
        for i in 0..n - 1 {
            out.sub[i] = -dt * self.sub[i];
            out.sup[i] = -dt * self.sup[i];
        }
        out
    }

    /// `self += c·other`.
    pub fn add_scaled(&mut self, c: f64, other: &TriDiag) {
        for (a, b) in self.diag.iter_mut().zip(&other.diag) {
            *a += c * b;
        }
        for (a, b) in self.sub.iter_mut().zip(&other.sub) {
            *a += c * b;
        }
        for (a, b) in self.sup.iter_mut().zip(&other.sup) {
            *a += c * b;
        }
    }

    /// Thomas elimination; `rhs` is overwritten with the solution.
    ///
    /// Returns `false` when a pivot underflows (caller reports the offending
    /// time level and node).
    #[must_use]
    pub fn solve_in_place(&self, rhs: &mut [f64]) -> bool {
        let n = self.order();
        debug_assert_eq!(rhs.len(), n);
        let mut c = vec![0.0; n - 1];
        let mut piv = self.diag[0];
        if !pivot_ok(piv) {
            return false;
        }
        c[0] = self.sup[0] / piv;
        rhs[0] /= piv;
        for i in 1..n {
            piv = self.diag[i] - self.sub[i - 1] * c[i - 1];
            if !pivot_ok(piv) {
                return false;
            }
            if i < n - 1 {
                c[i] = self.sup[i] / piv;
            }
            rhs[i] = (rhs[i] - self.sub[i - 1] * rhs[i - 1]) / piv;
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= c[i] * rhs[i + 1];
        }
        true
    }

    /// Solve `Aᵀ x = rhs` in place (Thomas on the swapped bands).
    #[must_use]
    pub fn solve_transpose_in_place(&self, rhs: &mut [f64]) -> bool {
        let n = self.order();
        debug_assert_eq!(rhs.len(), n);
        let mut c = vec![0.0; n - 1];
        let mut piv = self.diag[0];
        if !pivot_ok(piv) {
            return false;
        }
        // Transposed bands: sub ↔ sup.
        c[0] = self.sub[0] / piv;
        rhs[0] /= piv;
        for i in 1..n {
            piv = self.diag[i] - self.sup[i - 1] * c[i - 1];
            if !pivot_ok(piv) {
                return false;
            }
            if i < n - 1 {
                c[i] = self.sub[i] / piv;
            }
            rhs[i] = (rhs[i] - self.sup[i - 1] * rhs[i - 1]) / piv;
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= c[i] * rhs[i + 1];
        }
        true
    }

    /// Maximum absolute row sum (∞-norm).
    pub fn max_row_sum(&self) -> f64 {
        let n = self.order();
        let mut m: f64 = 0.0;
        for i in 0..n {
            let mut s = self.diag[i].abs();
            if i > 0 {
                s += self.sub[i - 1].abs();
            }
            if i + 1 < n {
                s += self.sup[i].abs();
            }
            m = m.max(s);
        }
        m
    }
}

#[inline]
fn pivot_ok(p: f64) -> bool {
    p.is_finite() && p.abs() > 1e-300
}

/// Borrowed-or-owned tridiagonal matrix, so per-level caches can hand out
/// references while uncached paths assemble on the fly.
pub enum MatHandle<'a> {
    Borrowed(&'a TriDiag),
    Owned(TriDiag),
}

impl core::ops::Deref for MatHandle<'_> {
    type Target = TriDiag;
    fn deref(&self) -> &TriDiag {
        match self {
            MatHandle::Borrowed(m) => m,
            MatHandle::Owned(m) => m,
        }
    }
}

/// Dense symmetric matrix in row-major full storage, used only for the small
/// (`n·N ≤ 9`) coercivity certificates.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMat {
    pub fn zeros(n: usize) -> Self {
        SymMat { n, data: vec![0.0; n * n] }
    }

    pub fn identity_scaled(n: usize, c: f64) -> Self {
        let mut m = SymMat::zeros(n);
        for i in 0..n {
            *m.at_mut(i, i) = c;
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }

    /// Largest absolute deviation from symmetry.
    pub fn asymmetry(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                d = d.max((self.at(i, j) - self.at(j, i)).abs());
            }
        }
        d
    }

    /// `self -= c · v vᵀ`.
    pub fn subtract_outer(&mut self, c: f64, v: &[f64]) {
        debug_assert_eq!(v.len(), self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                *self.at_mut(i, j) -= c * v[i] * v[j];
            }
        }
    }

    pub fn quadratic_form(&self, y: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += y[i] * self.at(i, j) * y[j];
            }
        }
        s
    }

    /// All eigenvalues, ascending, by cyclic Jacobi rotations.
    ///
    /// Deterministic sweep order; converges quadratically for the tiny
    /// symmetric matrices this crate produces.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.n;
        let mut a = self.clone();
        // Symmetrize roundoff before iterating.
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (a.at(i, j) + a.at(j, i));
                *a.at_mut(i, j) = m;
                *a.at_mut(j, i) = m;
            }
        }
        let scale: f64 = a.data.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1.0);
        for _sweep in 0..64 {
            let mut off: f64 = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off = off.max(a.at(i, j).abs());
                }
            }
            if off <= 1e-15 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.at(p, q);
                    if apq.abs() <= 1e-300 {
                        continue;
                    }
                    let app = a.at(p, p);
                    let aqq = a.at(q, q);
                    let theta = 0.5 * (aqq - app) / apq;
                    // tan of the rotation angle, stable branch.
                    let t = if theta >= 0.0 {
                        1.0 / (theta + libm::sqrt(1.0 + theta * theta))
                    } else {
                        -1.0 / (-theta + libm::sqrt(1.0 + theta * theta))
                    };
                    let c = 1.0 / libm::sqrt(1.0 + t * t);
                    let s = t * c;
                    for k in 0..n {
                        let akp = a.at(k, p);
                        let akq = a.at(k, q);
                        *a.at_mut(k, p) = c * akp - s * akq;
                        *a.at_mut(k, q) = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a.at(p, k);
                        let aqk = a.at(q, k);
                        *a.at_mut(p, k) = c * apk - s * aqk;
                        *a.at_mut(q, k) = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a.at(i, i)).collect();
        ev.sort_by(|x, y| x.partial_cmp(y).expect("eigenvalues are finite"));
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn axpy(y: &mut [f64], c: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for i in 0..y.len() {
        y[i] += c * x[i];
    }
}

pub fn scale(v: &mut [f64], c: f64) {
    for x in v.iter_mut() {
        *x *= c;
    }
}
