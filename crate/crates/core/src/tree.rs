//! Finite filtered probability space: a 2^N-ary tree of depth M whose edges
//! carry ±√Δt increments of an N-dimensional discrete Wiener process.
//!
//! Level `k` holds `2^(N·k)` nodes; the node index is the concatenation of
//! the `k` edge words walked from the root, each word being `N` bits (bit `i`
//! is the sign of component `i`). Every child is equally likely, so
//! conditional expectations are plain averages and all the moment identities
//! used by the solvers hold exactly:
//!
//! ```text
//! E[Δw_i] = 0,    E[Δw_i Δw_j] = Δt·δ_ij,    Δw_i² ≡ Δt.
//! ```

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::error::{Error, Result};

/// Hard cap on `N·M`: level M has `2^(N·M)` nodes.
pub const MAX_DEPTH_BITS: usize = 24;

/// The finite noise tree (filtration, increments, exact expectations).
#[derive(Debug, Clone)]
pub struct NoiseTree {
    /// Number of Wiener components N.
    pub n_components: usize,
    /// Number of time steps M (levels run `0..=M`).
    pub n_steps: usize,
    /// Horizon T.
    pub horizon: f64,
    /// Δt = T / M.
    pub dt: f64,
    pub sqrt_dt: f64,
    /// `w[k][node * N + i]` = value of component `i` at level `k` and node.
    w: Vec<Vec<f64>>,
}

impl NoiseTree {
    pub fn new(n_components: usize, n_steps: usize, horizon: f64) -> Result<Self> {
        if !(1..=3).contains(&n_components) {
            return Err(Error::InvalidTree(alloc::format!(
                "N must be 1, 2, or 3, got {n_components}"
            )));
        }
        if n_steps < 1 {
            return Err(Error::InvalidTree(alloc::format!("M must be ≥ 1, got {n_steps}")));
        }
        if n_components * n_steps > MAX_DEPTH_BITS {
            return Err(Error::InvalidTree(alloc::format!(
                "N·M = {} exceeds the memory guard {MAX_DEPTH_BITS}",
                n_components * n_steps
            )));
        }
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::InvalidTree(alloc::format!("T must be positive, got {horizon}")));
        }
        let dt = horizon / n_steps as f64;
        let sqrt_dt = libm::sqrt(dt);
        let mut w: Vec<Vec<f64>> = Vec::with_capacity(n_steps + 1);
        w.push(vec![0.0; n_components]);
        for k in 0..n_steps {
            let parents = &w[k];
            let n_parents = 1usize << (n_components * k);
            let mut next = vec![0.0; (n_parents << n_components) * n_components];
            for node in 0..n_parents {
                for word in 0..(1usize << n_components) {
                    let child = (node << n_components) | word;
                    for i in 0..n_components {
                        let sign = if word & (1 << i) != 0 { 1.0 } else { -1.0 };
                        next[child * n_components + i] =
                            parents[node * n_components + i] + sign * sqrt_dt;
                    }
                }
            }
            w.push(next);
        }
        Ok(NoiseTree { n_components, n_steps, horizon, dt, sqrt_dt, w })
    }

    /// Number of edge words out of one node (`2^N`).
    #[inline]
    pub fn n_words(&self) -> usize {
        1usize << self.n_components
    }

    /// Nodes at a level (`2^(N·k)`).
    #[inline]
    pub fn nodes_at(&self, level: usize) -> usize {
        1usize << (self.n_components * level)
    }

    /// Total node count over all levels.
    pub fn total_nodes(&self) -> usize {
        (0..=self.n_steps).map(|k| self.nodes_at(k)).sum()
    }

    /// Probability of one node at a level (uniform).
    #[inline]
    pub fn node_probability(&self, level: usize) -> f64 {
        1.0 / self.nodes_at(level) as f64
    }

    #[inline]
    pub fn child(&self, node: usize, word: usize) -> usize {
        (node << self.n_components) | word
    }

    #[inline]
    pub fn parent(&self, node: usize) -> usize {
        node >> self.n_components
    }

    /// Sign (±1) of component `i` in an edge word.
    #[inline]
    pub fn word_sign(&self, word: usize, i: usize) -> f64 {
        if word & (1 << i) != 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Increment `Δw_i` along an edge word.
    #[inline]
    pub fn increment(&self, word: usize, i: usize) -> f64 {
        self.word_sign(word, i) * self.sqrt_dt
    }

    /// `w_i(t_k)` at a node.
    #[inline]
    pub fn w_value(&self, level: usize, node: usize, i: usize) -> f64 {
        self.w[level][node * self.n_components + i]
    }

    /// All component values `w(t_k)` at a node.
    #[inline]
    pub fn w_values(&self, level: usize, node: usize) -> &[f64] {
        let n = self.n_components;
        &self.w[level][node * n..(node + 1) * n]
    }

    #[inline]
    pub fn time(&self, level: usize) -> f64 {
        self.dt * level as f64
    }

    pub(crate) fn check_level(&self, level: usize) -> Result<()> {
        if level > self.n_steps {
            return Err(Error::LevelOutOfRange { level, max: self.n_steps });
        }
        Ok(())
    }
}

/// One time slice of a random mesh function: a grid vector per node of one
/// tree level (`data[node * n_x + j]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub level: usize,
    pub n_x: usize,
    pub data: Vec<f64>,
}

impl Slice {
    pub fn zeros(tree: &NoiseTree, level: usize, n_x: usize) -> Self {
        Slice { level, n_x, data: vec![0.0; tree.nodes_at(level) * n_x] }
    }

    /// Deterministic slice: the same grid vector at every node.
    pub fn constant(tree: &NoiseTree, level: usize, values: &[f64]) -> Self {
        let n_nodes = tree.nodes_at(level);
        let mut data = Vec::with_capacity(n_nodes * values.len());
        for _ in 0..n_nodes {
            data.extend_from_slice(values);
        }
        Slice { level, n_x: values.len(), data }
    }

    #[inline]
    pub fn node(&self, node: usize) -> &[f64] {
        &self.data[node * self.n_x..(node + 1) * self.n_x]
    }

    #[inline]
    pub fn node_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.data[node * self.n_x..(node + 1) * self.n_x]
    }

    pub fn n_nodes(&self) -> usize {
        self.data.len().checked_div(self.n_x).unwrap_or(0)
    }

    /// Exact expectation over nodes, one value per grid index.
    pub fn expectation(&self) -> Vec<f64> {
        let n_nodes = self.n_nodes();
        let mut mean = vec![0.0; self.n_x];
        for node in 0..n_nodes {
            for (m, v) in mean.iter_mut().zip(&self.data[node * self.n_x..]) {
                *m += v;
            }
        }
        let p = 1.0 / n_nodes as f64;
        for m in mean.iter_mut() {
            *m *= p;
        }
        mean
    }
}

/// Random mesh function adapted to the tree filtration: one grid vector per
/// node, for every level `0..=M`.
///
/// Adaptedness is structural — the value at a node can only depend on that
/// node's increment word, because that is all the container stores.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    pub n_x: usize,
    /// `levels[k].len() == nodes_at(k) * n_x`.
    pub levels: Vec<Vec<f64>>,
}

impl AdaptedField {
    pub fn zeros(tree: &NoiseTree, n_x: usize) -> Self {
        let levels =
            (0..=tree.n_steps).map(|k| vec![0.0; tree.nodes_at(k) * n_x]).collect();
        AdaptedField { n_x, levels }
    }

    /// Build from a per-(level, node, grid-index) function. The function
    /// receives the node's noise history through `w`, so any adapted field is
    /// expressible.
    pub fn from_fn(
        tree: &NoiseTree,
        n_x: usize,
        mut f: impl FnMut(usize, usize, &[f64], usize) -> f64,
    ) -> Self {
        let mut field = AdaptedField::zeros(tree, n_x);
        for k in 0..=tree.n_steps {
            for node in 0..tree.nodes_at(k) {
                let w = tree.w_values(k, node);
                let base = node * n_x;
                for j in 0..n_x {
                    field.levels[k][base + j] = f(k, node, w, j);
                }
            }
        }
        field
    }

    #[inline]
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    #[inline]
    pub fn value(&self, level: usize, node: usize) -> &[f64] {
        &self.levels[level][node * self.n_x..(node + 1) * self.n_x]
    }

    #[inline]
    pub fn value_mut(&mut self, level: usize, node: usize) -> &mut [f64] {
        &mut self.levels[level][node * self.n_x..(node + 1) * self.n_x]
    }

    /// Copy of one time slice (`I_t u = u(·, t)`).
    pub fn slice(&self, level: usize) -> Slice {
        Slice { level, n_x: self.n_x, data: self.levels[level].clone() }
    }

    /// [`Self::slice`] with a range check instead of a panic.
    pub fn slice_checked(&self, level: usize) -> Result<Slice> {
        if level >= self.levels.len() {
            return Err(Error::LevelOutOfRange { level, max: self.levels.len() - 1 });
        }
        Ok(self.slice(level))
    }

    pub fn set_slice(&mut self, s: &Slice) {
        self.levels[s.level].copy_from_slice(&s.data);
    }

    /// `self += c·other`, level by level.
    pub fn add_scaled(&mut self, c: f64, other: &AdaptedField) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in self.levels.iter_mut() {
            for x in l.iter_mut() {
                *x *= c;
            }
        }
    }

    /// Scale one whole level.
    pub fn scale_level(&mut self, level: usize, c: f64) {
        for x in self.levels[level].iter_mut() {
            *x *= c;
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for l in &self.levels {
            for x in l {
                m = m.max(x.abs());
            }
        }
        m
    }

    pub(crate) fn check_shape(&self, tree: &NoiseTree, n_x: usize) -> Result<()> {
        if self.n_x != n_x {
            return Err(Error::ShapeMismatch { expected: n_x, got: self.n_x, what: "field n_x" });
        }
        if self.levels.len() != tree.n_steps + 1 {
            return Err(Error::ShapeMismatch {
                expected: tree.n_steps + 1,
                got: self.levels.len(),
                what: "field levels",
            });
        }
        for (k, l) in self.levels.iter().enumerate() {
            if l.len() != tree.nodes_at(k) * n_x {
                return Err(Error::ShapeMismatch {
                    expected: tree.nodes_at(k) * n_x,
                    got: l.len(),
                    what: "field level slice",
                });
            }
        }
        Ok(())
    }
}

/// Exact conditional expectation `E[· | F_k]`: average a level-(k+1) slice
/// over each node's `2^N` children.
pub fn conditional_expectation(tree: &NoiseTree, slice: &Slice) -> Result<Slice> {
    tree.check_level(slice.level)?;
    if slice.level == 0 {
        return Err(Error::LevelOutOfRange { level: 0, max: tree.n_steps });
    }
    let n_x = slice.n_x;
    let level = slice.level - 1;
    let p = 1.0 / tree.n_words() as f64;
    let mut out = Slice::zeros(tree, level, n_x);
    for node in 0..tree.nodes_at(level) {
        let acc = &mut out.data[node * n_x..(node + 1) * n_x];
        for word in 0..tree.n_words() {
            let child = tree.child(node, word);
            let v = &slice.data[child * n_x..(child + 1) * n_x];
            for j in 0..n_x {
                acc[j] += v[j];
            }
        }
        for a in acc.iter_mut() {
            *a *= p;
        }
    }
    Ok(out)
}

/// `E[X · Δw_i | F_k] / Δt` for a level-(k+1) slice: the conditional
/// covariance of the slice with the next increment. This is the projection
/// that extracts martingale-representation integrands.
pub fn conditional_increment_covariance(
    tree: &NoiseTree,
    slice: &Slice,
    component: usize,
) -> Result<Slice> {
    tree.check_level(slice.level)?;
    if slice.level == 0 || component >= tree.n_components {
        return Err(Error::Invalid(alloc::format!(
            "need level ≥ 1 and component < {}, got level {} component {component}",
            tree.n_components,
            slice.level
        )));
    }
    let n_x = slice.n_x;
    let level = slice.level - 1;
    // E[X Δw_i | ν]/Δt = Σ_ω 2^-N · (±√Δt) X(ν_ω) / Δt.
    let p = 1.0 / tree.n_words() as f64;
    let coeff = p * tree.sqrt_dt / tree.dt;
    let mut out = Slice::zeros(tree, level, n_x);
    for node in 0..tree.nodes_at(level) {
        let acc = &mut out.data[node * n_x..(node + 1) * n_x];
        for word in 0..tree.n_words() {
            let child = tree.child(node, word);
            let sign = tree.word_sign(word, component);
            let v = &slice.data[child * n_x..(child + 1) * n_x];
            for j in 0..n_x {
                acc[j] += sign * v[j];
            }
        }
        for a in acc.iter_mut() {
            *a *= coeff;
        }
    }
    Ok(out)
}

/// Exact Ito integral `∫_0^{t_k} ξ dw_j` of an adapted integrand, returned as
/// the adapted field of its running values (level 0 is zero).
pub fn ito_integral(tree: &NoiseTree, integrand: &AdaptedField, component: usize) -> Result<AdaptedField> {
    integrand.check_shape(tree, integrand.n_x)?;
    if component >= tree.n_components {
        return Err(Error::Invalid(alloc::format!(
            "component {component} out of range (< {})",
            tree.n_components
        )));
    }
    let n_x = integrand.n_x;
    let mut out = AdaptedField::zeros(tree, n_x);
    for k in 0..tree.n_steps {
        for node in 0..tree.nodes_at(k) {
            let xi = integrand.value(k, node);
            for word in 0..tree.n_words() {
                let child = tree.child(node, word);
                let dw = tree.increment(word, component);
                let prev = out.levels[k][node * n_x..(node + 1) * n_x].to_vec();
                let next = &mut out.levels[k + 1][child * n_x..(child + 1) * n_x];
                for j in 0..n_x {
                    next[j] = prev[j] + xi[j] * dw;
                }
            }
        }
    }
    Ok(out)
}

/// Martingale representation of a terminal variable:
///
/// ```text
/// X = E[X] + Σ_i ∫_0^T γ_i dw_i + Σ_k r_k,
/// ```
///
/// where `γ_i` is the conditional covariance of the node martingale
/// `m_k = E[X|F_k]` with the next increment, and `r` collects whatever part
/// of each one-step martingale increment is orthogonal to `{1, Δw_1..Δw_N}`
/// under the child distribution. For `N = 1` the two-point conditional law is
/// spanned by `{1, Δw}` and the residual vanishes identically; for `N ≥ 2`
/// the increment products `Δw_i Δw_j` open extra martingale directions and
/// the residual carries them, keeping the reconstruction exact.
#[derive(Debug, Clone)]
pub struct MartingaleRepresentation {
    /// `E[X]` (one value per grid index).
    pub mean: Vec<f64>,
    /// One integrand field per noise component; the value at level `k` is the
    /// integrand on `[t_k, t_{k+1})` (level M is unused and zero).
    pub gamma: Vec<AdaptedField>,
    /// Residual increments indexed by the child node at level `k+1`
    /// (level 0 is zero).
    pub residual: AdaptedField,
    /// Node martingale `m_k = E[X | F_k]` (diagnostic; `m_M = X`).
    pub martingale: AdaptedField,
}

pub fn martingale_representation(
    tree: &NoiseTree,
    terminal: &Slice,
) -> Result<MartingaleRepresentation> {
    if terminal.level != tree.n_steps {
        return Err(Error::LevelOutOfRange { level: terminal.level, max: tree.n_steps });
    }
    let n_x = terminal.n_x;
    let n = tree.n_components;

    let mut martingale = AdaptedField::zeros(tree, n_x);
    martingale.levels[tree.n_steps].copy_from_slice(&terminal.data);
    for k in (0..tree.n_steps).rev() {
        let upper = Slice {
            level: k + 1,
            n_x,
            data: martingale.levels[k + 1].clone(),
        };
        let lower = conditional_expectation(tree, &upper)?;
        martingale.levels[k].copy_from_slice(&lower.data);
    }

    let mut gamma = vec![AdaptedField::zeros(tree, n_x); n];
    for k in 0..tree.n_steps {
        let upper = Slice { level: k + 1, n_x, data: martingale.levels[k + 1].clone() };
        for (i, g) in gamma.iter_mut().enumerate() {
            let gi = conditional_increment_covariance(tree, &upper, i)?;
            g.levels[k].copy_from_slice(&gi.data);
        }
    }

    let mut residual = AdaptedField::zeros(tree, n_x);
    for k in 0..tree.n_steps {
        for node in 0..tree.nodes_at(k) {
            for word in 0..tree.n_words() {
                let child = tree.child(node, word);
                for j in 0..n_x {
                    let m_next = martingale.levels[k + 1][child * n_x + j];
                    let m_here = martingale.levels[k][node * n_x + j];
                    let mut predicted = m_here;
                    for (i, g) in gamma.iter().enumerate() {
                        predicted += g.levels[k][node * n_x + j] * tree.increment(word, i);
                    }
                    residual.levels[k + 1][child * n_x + j] = m_next - predicted;
                }
            }
        }
    }

    let mean = martingale.levels[0].clone();
    Ok(MartingaleRepresentation { mean, gamma, residual, martingale })
}

impl MartingaleRepresentation {
    /// Rebuild the terminal variable from mean + Ito sums + residuals; used by
    /// the exactness checks.
    pub fn reconstruct(&self, tree: &NoiseTree) -> Slice {
        let n_x = self.residual.n_x;
        let mut acc = AdaptedField::zeros(tree, n_x);
        acc.levels[0].copy_from_slice(&self.mean);
        for k in 0..tree.n_steps {
            for node in 0..tree.nodes_at(k) {
                for word in 0..tree.n_words() {
                    let child = tree.child(node, word);
                    for j in 0..n_x {
                        let mut v = acc.levels[k][node * n_x + j];
                        for (i, g) in self.gamma.iter().enumerate() {
                            v += g.levels[k][node * n_x + j] * tree.increment(word, i);
                        }
                        v += self.residual.levels[k + 1][child * n_x + j];
                        acc.levels[k + 1][child * n_x + j] = v;
                    }
                }
            }
        }
        acc.slice(tree.n_steps)
    }
}

/// CSV serialization of a slice, columns `level,node_index,grid_index,value`.
pub fn slice_to_csv(slice: &Slice) -> String {
    let mut out = String::from("level,node_index,grid_index,value\n");
    let n_nodes = slice.n_nodes();
    for node in 0..n_nodes {
        for j in 0..slice.n_x {
            let _ = writeln!(out, "{},{},{},{}", slice.level, node, j, slice.data[node * slice.n_x + j]);
        }
    }
    out
}

/// CSV serialization of a whole adapted field, same columns as [`slice_to_csv`].
pub fn adapted_field_to_csv(field: &AdaptedField) -> String {
    let mut out = String::from("level,node_index,grid_index,value\n");
    for (k, level) in field.levels.iter().enumerate() {
        let n_nodes = level.len() / field.n_x.max(1);
        for node in 0..n_nodes {
            for j in 0..field.n_x {
                let _ = writeln!(out, "{},{},{},{}", k, node, j, level[node * field.n_x + j]);
            }
        }
    }
    out
}
