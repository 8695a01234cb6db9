//! Coefficient fields of the operators and certification of the coercivity
//! conditions.
//!
//! Two views coexist:
//!
//! * the 1-D solver consumes scalar fields `b, f, λ, β_i, β̄_i` over
//!   `(x, time slot, tree node)` through the [`SpdeCoefficients`] trait
//!   (piecewise constant in time on `[t_k, t_{k+1})`, measurable at `t_k`);
//! * the condition checkers consume matrix/vector samples of general spatial
//!   dimension `n` and certify, by exact small-matrix eigenvalues,
//!
//! ```text
//! standard:      yᵀb y − ½ Σ_i (yᵀβ_i)²            ≥ δ  |y|²
//! strengthened:  Σ_i y_iᵀb y_i − ½ (Σ_i y_iᵀβ_i)²  ≥ δ₁ Σ_i |y_i|²
//! N0 criterion:  yᵀb y − (N0/2)(yᵀβ_i)²            ≥ δ₂ |y|²,  β_i ≡ 0 for i > N0
//! ```
//!
//! The strengthened form is the quadratic form of the `nN×nN` symmetric
//! matrix `I_N ⊗ b − ½ β βᵀ` with `β` the stacked `(β_1; …; β_N)` vector;
//! margins are smallest eigenvalues, minimized over all samples.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::SymMat;
use crate::rng;
use crate::tree::NoiseTree;

/// Where a coefficient is being sampled: time slot `level` (value on
/// `[t_k, t_{k+1})`, measurable at `t_k`), tree node at that level, and the
/// node's noise history `w(t_k)`.
#[derive(Debug, Clone, Copy)]
pub struct SampleCtx<'a> {
    pub level: usize,
    pub node: usize,
    pub t: f64,
    pub w: &'a [f64],
}

impl<'a> SampleCtx<'a> {
    pub fn deterministic(level: usize, t: f64) -> SampleCtx<'static> {
        SampleCtx { level, node: 0, t, w: &[] }
    }
}

/// Scalar coefficient fields of the 1-D operators
/// `A v = (b v)'' − (f v)' + λ v` and `B_i v = −(β_i v)' + β̄_i v`.
///
/// Implementations must be bounded in `(x, t, ω)` and differentiable in `x`;
/// `diffusion_dx` supplies `∂b/∂x` (closed form or finite difference), which
/// the assembly needs to discretize the divergence form consistently.
pub trait SpdeCoefficients {
    /// Number of noise components N.
    fn n_noise(&self) -> usize;

    /// `b(x, t, ω)`.
    fn diffusion(&self, x: f64, ctx: &SampleCtx) -> f64;

    /// `∂b/∂x (x, t, ω)`.
    fn diffusion_dx(&self, x: f64, ctx: &SampleCtx) -> f64;

    /// `f(x, t, ω)`.
    fn drift(&self, _x: f64, _ctx: &SampleCtx) -> f64 {
        0.0
    }

    /// `λ(x, t, ω)`.
    fn reaction(&self, _x: f64, _ctx: &SampleCtx) -> f64 {
        0.0
    }

    /// `β_i(x, t, ω)`.
    fn noise_transport(&self, _i: usize, _x: f64, _ctx: &SampleCtx) -> f64 {
        0.0
    }

    /// `β̄_i(x, t, ω)`.
    fn noise_reaction(&self, _i: usize, _x: f64, _ctx: &SampleCtx) -> f64 {
        0.0
    }

    /// True when no field depends on the tree node; solvers then reuse one
    /// assembly per level.
    fn is_deterministic(&self) -> bool {
        false
    }
}

/// Smooth bump `4 x̂ (1 − x̂)` on the unit coordinate; vanishes at the
/// boundary, max 1 at the midpoint.
fn bump(u: f64) -> f64 {
    4.0 * u * (1.0 - u)
}

/// Named coefficient presets reachable from configs.
#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    /// `b ≡ 1`, everything else zero; N = 1.
    Heat,
    /// Variable smooth diffusion, drift, reaction and one mild noise channel;
    /// N = 1, strengthened margin ≈ 0.95.
    Driftful,
    /// Two noise channels with path-dependent transport coefficients; N = 2,
    /// strengthened margin ≈ 0.57.
    Transport,
    /// One strong noise channel, strengthened margin ≈ 0.077 (monitoring the
    /// near-degenerate regime).
    NearDegenerate,
    /// Random bounded smooth fields with margin kept positive by
    /// construction; N = 2.
    Random { seed: u64 },
    /// The classical n = 2, N = 2 counterexample set
    /// `b = 0.51·I₂, β₁ = e₁, β₂ = e₂` (checker-only: the PDE solver is 1-D).
    Example1,
}

impl Preset {
    pub fn parse(name: &str, seed: Option<u64>) -> Result<Preset> {
        match name {
            "heat" => Ok(Preset::Heat),
            "driftful" => Ok(Preset::Driftful),
            "transport" => Ok(Preset::Transport),
            "neardegenerate" | "near_degenerate" => Ok(Preset::NearDegenerate),
            "random" => Ok(Preset::Random { seed: seed.unwrap_or(0) }),
            "example1" => Ok(Preset::Example1),
            other => Err(Error::Invalid(format!(
                "unknown coefficient preset `{other}` (known: heat, driftful, transport, \
                 neardegenerate, random, example1)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Heat => "heat",
            Preset::Driftful => "driftful",
            Preset::Transport => "transport",
            Preset::NearDegenerate => "neardegenerate",
            Preset::Random { .. } => "random",
            Preset::Example1 => "example1",
        }
    }

    /// Solver-side fields. `Example1` is two-dimensional and has none.
    pub fn solver_coefficients(&self, grid: &Grid) -> Result<Box<dyn SpdeCoefficients>> {
        let lo = grid.x_lo;
        let len = grid.x_hi - grid.x_lo;
        match self {
            Preset::Heat => Ok(Box::new(HeatCoefficients)),
            Preset::Driftful => Ok(Box::new(DriftfulCoefficients { lo, len })),
            Preset::Transport => Ok(Box::new(TransportCoefficients { lo, len })),
            Preset::NearDegenerate => Ok(Box::new(NearDegenerateCoefficients { lo, len })),
            Preset::Random { seed } => Ok(Box::new(RandomCoefficients::new(*seed, lo, len))),
            Preset::Example1 => Err(Error::UnsupportedDimension { n: 2 }),
        }
    }
}

pub struct HeatCoefficients;

impl SpdeCoefficients for HeatCoefficients {
    fn n_noise(&self) -> usize {
        1
    }
    fn diffusion(&self, _x: f64, _ctx: &SampleCtx) -> f64 {
        1.0
    }
    fn diffusion_dx(&self, _x: f64, _ctx: &SampleCtx) -> f64 {
        0.0
    }
    fn is_deterministic(&self) -> bool {
        true
    }
}

pub struct DriftfulCoefficients {
    lo: f64,
    len: f64,
}

impl SpdeCoefficients for DriftfulCoefficients {
    fn n_noise(&self) -> usize {
        1
    }
    fn diffusion(&self, x: f64, _ctx: &SampleCtx) -> f64 {
        let u = (x - self.lo) / self.len;
        1.0 + 0.3 * u * (1.0 - u)
    }
    fn diffusion_dx(&self, x: f64, _ctx: &SampleCtx) -> f64 {
        let u = (x - self.lo) / self.len;
        0.3 * (1.0 - 2.0 * u) / self.len
    }
    fn drift(&self, x: f64, _ctx: &SampleCtx) -> f64 {
        let u = (x - self.lo) / self.len;
        0.4 * libm::cos(core::f64::consts::PI * u)
    }
    fn reaction(&self, _x: f64, _ctx: &SampleCtx) -> f64 {
        -0.15
    }
    fn noise_transport(&self, _i: usize, x: f64, _ctx: &SampleCtx) -> f64 {
        let u = (x - self.lo) / self.len;
        0.5 * bump(u)
    }
    fn noise_reaction(&self, _i: usize, _x: f64, _ctx: &SampleCtx) -> f64 {
        0.1
    }
    fn is_deterministic(&self) -> bool {
        true
    }
}

pub struct TransportCoefficients {
    lo: f64,
    len: f64,
}

impl SpdeCoefficients for TransportCoefficients {
    fn n_noise(&self) -> usize {
        2
    }
    fn diffusion(&self, _x: f64, _ctx: &SampleCtx) -> f64 {
        1.0
    }
    fn diffusion_dx(&self, _x: f64, _ctx: &SampleCtx) -> f64 {
        0.0
    }
    fn drift(&self, _x: f64, _ctx: &SampleCtx) -> f64 {
        0.2
    }
    fn noise_transport(&self, i: usize, x: f64, ctx: &SampleCtx) -> f64 {
        let u = (x - self.lo) / self.len;
        match i {
            // Path-dependent amplitude, bounded via tanh, measurable at t_k.
            0 => {
                let amp = if ctx.w.is_empty() { 1.0 } else { 1.0 + 0.2 * libm::tanh(ctx.w[0]) };
                0.7 * bump(u) * amp
            }
            _ => 0.4 * libm::sin(core::f64::consts::PI * u),
        }
    }
    fn noise_reaction(&self, i: usize, _x: f64, _ctx: &SampleCtx) -> f64 {
        if i == 0 {
            0.15
        } else {
            -0.1
        }
    }
}

pub struct NearDegenerateCoefficients {
    lo: f64,
    len: f64,
}

impl SpdeCoefficients for NearDegenerateCoefficients {
    fn n_noise(&self) -> usize {
        1
    }
    fn diffusion(&self, _x: f64, _ctx: &SampleCtx) -> f64 {
        1.0
    }
    fn diffusion_dx(&self, _x: f64, _ctx: &SampleCtx) -> f64 {
        0.0
    }
    fn noise_transport(&self, _i: usize, x: f64, _ctx: &SampleCtx) -> f64 {
        let u = (x - self.lo) / self.len;
        1.36 * bump(u)
    }
    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Random smooth fields: three seeded Fourier-ish amplitudes per field,
/// scaled so the strengthened margin stays ≥ 0.3.
pub struct RandomCoefficients {
    lo: f64,
    len: f64,
    b_amp: [f64; 2],
    f_amp: f64,
    lam_amp: f64,
    beta_amp: [f64; 2],
    beta_bar: [f64; 2],
}

impl RandomCoefficients {
    pub fn new(seed: u64, lo: f64, len: f64) -> Self {
        let mut r = rng::seeded(seed ^ 0x5eed_c0ef);
        RandomCoefficients {
            lo,
            len,
            b_amp: [0.2 * rng::symmetric(&mut r), 0.15 * rng::symmetric(&mut r)],
            f_amp: 0.4 * rng::symmetric(&mut r),
            lam_amp: 0.3 * rng::symmetric(&mut r),
            beta_amp: [0.5 * rng::symmetric(&mut r), 0.4 * rng::symmetric(&mut r)],
            beta_bar: [0.2 * rng::symmetric(&mut r), 0.2 * rng::symmetric(&mut r)],
        }
    }
}

impl SpdeCoefficients for RandomCoefficients {
    fn n_noise(&self) -> usize {
        2
    }
    fn diffusion(&self, x: f64, _ctx: &SampleCtx) -> f64 {
        let u = (x - self.lo) / self.len;
        let pi = core::f64::consts::PI;
        1.0 + self.b_amp[0] * libm::sin(pi * u) + self.b_amp[1] * u * (1.0 - u)
    }
    fn diffusion_dx(&self, x: f64, _ctx: &SampleCtx) -> f64 {
        let u = (x - self.lo) / self.len;
        let pi = core::f64::consts::PI;
        (self.b_amp[0] * pi * libm::cos(pi * u) + self.b_amp[1] * (1.0 - 2.0 * u)) / self.len
    }
    fn drift(&self, x: f64, _ctx: &SampleCtx) -> f64 {
        let u = (x - self.lo) / self.len;
        self.f_amp * libm::cos(core::f64::consts::PI * u)
    }
    fn reaction(&self, _x: f64, _ctx: &SampleCtx) -> f64 {
        self.lam_amp
    }
    fn noise_transport(&self, i: usize, x: f64, _ctx: &SampleCtx) -> f64 {
        let u = (x - self.lo) / self.len;
        self.beta_amp[i.min(1)] * bump(u)
    }
    fn noise_reaction(&self, i: usize, _x: f64, _ctx: &SampleCtx) -> f64 {
        self.beta_bar[i.min(1)]
    }
    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Adds `K` to the reaction coefficient (`λ → λ + K`); everything else passes
/// through.
pub struct ReactionShifted<'a> {
    pub inner: &'a dyn SpdeCoefficients,
    pub shift: f64,
}

impl<'a> SpdeCoefficients for ReactionShifted<'a> {
    fn n_noise(&self) -> usize {
        self.inner.n_noise()
    }
    fn diffusion(&self, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.diffusion(x, ctx)
    }
    fn diffusion_dx(&self, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.diffusion_dx(x, ctx)
    }
    fn drift(&self, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.drift(x, ctx)
    }
    fn reaction(&self, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.reaction(x, ctx) + self.shift
    }
    fn noise_transport(&self, i: usize, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.noise_transport(i, x, ctx)
    }
    fn noise_reaction(&self, i: usize, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.noise_reaction(i, x, ctx)
    }
    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

/// Bounded smooth perturbation of every field, scaled by `eps`: the
/// disturbance shapes are seeded trigonometric profiles; the `β` shapes
/// vanish at the boundary.
pub struct Perturbed<'a> {
    pub inner: &'a dyn SpdeCoefficients,
    pub eps: f64,
    lo: f64,
    len: f64,
    c: [f64; 6],
}

impl<'a> Perturbed<'a> {
    pub fn new(inner: &'a dyn SpdeCoefficients, eps: f64, seed: u64, grid: &Grid) -> Self {
        let mut r = rng::seeded(seed ^ 0x7e57_0b5e);
        let mut c = [0.0; 6];
        for v in c.iter_mut() {
            *v = rng::symmetric(&mut r);
        }
        Perturbed { inner, eps, lo: grid.x_lo, len: grid.x_hi - grid.x_lo, c }
    }

    fn u(&self, x: f64) -> f64 {
        (x - self.lo) / self.len
    }
}

impl<'a> SpdeCoefficients for Perturbed<'a> {
    fn n_noise(&self) -> usize {
        self.inner.n_noise()
    }
    fn diffusion(&self, x: f64, ctx: &SampleCtx) -> f64 {
        let u = self.u(x);
        self.inner.diffusion(x, ctx)
            + self.eps * self.c[0] * libm::cos(core::f64::consts::PI * u)
    }
    fn diffusion_dx(&self, x: f64, ctx: &SampleCtx) -> f64 {
        let u = self.u(x);
        let pi = core::f64::consts::PI;
        self.inner.diffusion_dx(x, ctx) - self.eps * self.c[0] * pi * libm::sin(pi * u) / self.len
    }
    fn drift(&self, x: f64, ctx: &SampleCtx) -> f64 {
        let u = self.u(x);
        self.inner.drift(x, ctx) + self.eps * self.c[1] * libm::sin(core::f64::consts::PI * u)
    }
    fn reaction(&self, x: f64, ctx: &SampleCtx) -> f64 {
        let u = self.u(x);
        self.inner.reaction(x, ctx) + self.eps * self.c[2] * (1.0 - u)
    }
    fn noise_transport(&self, i: usize, x: f64, ctx: &SampleCtx) -> f64 {
        let u = self.u(x);
        let c = if i == 0 { self.c[3] } else { self.c[4] };
        self.inner.noise_transport(i, x, ctx) + self.eps * c * bump(u)
    }
    fn noise_reaction(&self, i: usize, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.noise_reaction(i, x, ctx) + self.eps * self.c[5]
    }
    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

/// Supplies `∂b/∂x` by centered differences (step `h/2` by convention) for
/// coefficient sets given without a closed-form derivative.
pub struct FiniteDifferenceDx<'a> {
    pub inner: &'a dyn SpdeCoefficients,
    pub step: f64,
}

impl<'a> SpdeCoefficients for FiniteDifferenceDx<'a> {
    fn n_noise(&self) -> usize {
        self.inner.n_noise()
    }
    fn diffusion(&self, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.diffusion(x, ctx)
    }
    fn diffusion_dx(&self, x: f64, ctx: &SampleCtx) -> f64 {
        (self.inner.diffusion(x + self.step, ctx) - self.inner.diffusion(x - self.step, ctx))
            / (2.0 * self.step)
    }
    fn drift(&self, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.drift(x, ctx)
    }
    fn reaction(&self, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.reaction(x, ctx)
    }
    fn noise_transport(&self, i: usize, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.noise_transport(i, x, ctx)
    }
    fn noise_reaction(&self, i: usize, x: f64, ctx: &SampleCtx) -> f64 {
        self.inner.noise_reaction(i, x, ctx)
    }
    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

/// Sup over grid nodes, time slots, and tree nodes of `|λ|` (used by the
/// implicit-step guard) and of `|β̄|` plus transport bounds (used by the
/// step-size warning).
pub fn field_bounds(coeffs: &dyn SpdeCoefficients, grid: &Grid, tree: &NoiseTree) -> FieldBounds {
    let mut out = FieldBounds::default();
    let node_counts =
        |level: usize| if coeffs.is_deterministic() { 1 } else { tree.nodes_at(level) };
    for level in 0..=tree.n_steps {
        for node in 0..node_counts(level) {
            let ctx =
                SampleCtx { level, node, t: tree.time(level), w: tree.w_values(level, node) };
            for j in 1..=grid.n_x {
                let x = grid.node(j);
                out.max_abs_reaction = out.max_abs_reaction.max(coeffs.reaction(x, &ctx).abs());
                out.max_diffusion = out.max_diffusion.max(coeffs.diffusion(x, &ctx).abs());
                out.max_abs_drift = out.max_abs_drift.max(coeffs.drift(x, &ctx).abs());
                for i in 0..coeffs.n_noise() {
                    out.max_abs_noise_reaction = out
                        .max_abs_noise_reaction
                        .max(coeffs.noise_reaction(i, x, &ctx).abs());
                    out.max_abs_noise_transport = out
                        .max_abs_noise_transport
                        .max(coeffs.noise_transport(i, x, &ctx).abs());
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FieldBounds {
    pub max_diffusion: f64,
    pub max_abs_drift: f64,
    pub max_abs_reaction: f64,
    pub max_abs_noise_transport: f64,
    pub max_abs_noise_reaction: f64,
}

/// Largest `|β_i|` at the two boundary points over all slots/nodes. The
/// second-order energy monitors are only meaningful when this vanishes.
pub fn boundary_noise_transport(
    coeffs: &dyn SpdeCoefficients,
    grid: &Grid,
    tree: &NoiseTree,
) -> f64 {
    let mut m: f64 = 0.0;
    let node_counts =
        |level: usize| if coeffs.is_deterministic() { 1 } else { tree.nodes_at(level) };
    for level in 0..=tree.n_steps {
        for node in 0..node_counts(level) {
            let ctx =
                SampleCtx { level, node, t: tree.time(level), w: tree.w_values(level, node) };
            for i in 0..coeffs.n_noise() {
                m = m.max(coeffs.noise_transport(i, grid.x_lo, &ctx).abs());
                m = m.max(coeffs.noise_transport(i, grid.x_hi, &ctx).abs());
            }
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Condition checkers (general spatial dimension n).
// ---------------------------------------------------------------------------

/// One sampled coefficient point for the checkers: a symmetric `n×n` matrix
/// `b` and the `N` transport vectors `β_i ∈ ℝⁿ`, with provenance.
#[derive(Debug, Clone)]
pub struct CoefficientSample {
    pub b: SymMat,
    /// `beta[i]` is `β_{i+1}` (length `n` each).
    pub beta: Vec<Vec<f64>>,
    pub location: SampleLocation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLocation {
    pub x: f64,
    pub level: usize,
    pub node: usize,
}

impl SampleLocation {
    pub const ORIGIN: SampleLocation = SampleLocation { x: 0.0, level: 0, node: 0 };
}

pub const SYMMETRY_TOL: f64 = 1e-12;

impl CoefficientSample {
    pub fn dim(&self) -> usize {
        self.b.n
    }

    pub fn n_noise(&self) -> usize {
        self.beta.len()
    }

    fn validate(&self) -> Result<()> {
        let dev = self.b.asymmetry();
        if dev > SYMMETRY_TOL {
            return Err(Error::NonSymmetricB { deviation: dev });
        }
        for beta in &self.beta {
            if beta.len() != self.b.n {
                return Err(Error::ShapeMismatch {
                    expected: self.b.n,
                    got: beta.len(),
                    what: "β sample dimension",
                });
            }
        }
        Ok(())
    }

    /// `b − ½ Σ_i β_i β_iᵀ`.
    fn standard_matrix(&self) -> SymMat {
        let mut m = self.b.clone();
        for beta in &self.beta {
            m.subtract_outer(0.5, beta);
        }
        m
    }

    /// `I_N ⊗ b − ½ β βᵀ` on the stacked vector.
    fn strengthened_matrix(&self) -> SymMat {
        let n = self.dim();
        let nn = n * self.n_noise();
        let mut m = SymMat::zeros(nn);
        for blk in 0..self.n_noise() {
            for i in 0..n {
                for j in 0..n {
                    *m.at_mut(blk * n + i, blk * n + j) = self.b.at(i, j);
                }
            }
        }
        let mut stacked = Vec::with_capacity(nn);
        for beta in &self.beta {
            stacked.extend_from_slice(beta);
        }
        m.subtract_outer(0.5, &stacked);
        m
    }
}

/// The classical strengthened-coercivity counterexample:
/// `n = 2, N = 2, β₁ = e₁, β₂ = e₂, b = ½(β₁β₁ᵀ + β₂β₂ᵀ) + 0.01·I₂ = 0.51·I₂`.
pub fn example1_sample() -> CoefficientSample {
    let b = SymMat::identity_scaled(2, 0.51);
    CoefficientSample {
        b,
        beta: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        location: SampleLocation::ORIGIN,
    }
}

/// Random checker sample with entries bounded by 1 in magnitude; the
/// diffusion matrix is symmetric by construction and may or may not be
/// coercive — the implication suites need both kinds.
pub fn random_condition_sample(r: &mut rng::Rng, n: usize, n_noise: usize) -> CoefficientSample {
    let mut b = SymMat::zeros(n);
    let shift = 0.3 + 1.2 * rng::unit(r);
    for i in 0..n {
        for j in 0..=i {
            let v = 0.45 * rng::symmetric(r);
            *b.at_mut(i, j) = v;
            *b.at_mut(j, i) = v;
        }
        *b.at_mut(i, i) += shift;
    }
    let scale = rng::unit(r);
    let beta = (0..n_noise)
        .map(|_| (0..n).map(|_| scale * rng::symmetric(r)).collect())
        .collect();
    CoefficientSample { b, beta, location: SampleLocation::ORIGIN }
}

fn min_over_samples(
    samples: &[CoefficientSample],
    mut f: impl FnMut(&CoefficientSample) -> Result<f64>,
) -> Result<(f64, SampleLocation)> {
    if samples.is_empty() {
        return Err(Error::Invalid(String::from("no coefficient samples supplied")));
    }
    let mut best = f64::INFINITY;
    let mut loc = samples[0].location;
    for s in samples {
        s.validate()?;
        let v = f(s)?;
        if v < best {
            best = v;
            loc = s.location;
        }
    }
    Ok((best, loc))
}

/// Margin of the standard coercivity condition: the smallest eigenvalue of
/// `b − ½Σβ_iβ_iᵀ` over all samples. The condition holds with `δ = margin`
/// iff the margin is positive.
pub fn coercivity_margin(samples: &[CoefficientSample]) -> Result<(f64, SampleLocation)> {
    min_over_samples(samples, |s| Ok(s.standard_matrix().min_eigenvalue()))
}

/// Margin of the strengthened condition: smallest eigenvalue of the stacked
/// `nN×nN` block form.
pub fn strengthened_margin(samples: &[CoefficientSample]) -> Result<(f64, SampleLocation)> {
    min_over_samples(samples, |s| Ok(s.strengthened_matrix().min_eigenvalue()))
}

/// Margin of the N0 sufficient criterion; requires `β_i ≡ 0` for `i > N0`.
pub fn n0_margin(samples: &[CoefficientSample], n0: usize) -> Result<(f64, SampleLocation)> {
    if n0 == 0 {
        return Err(Error::Invalid(String::from("N0 must be ≥ 1")));
    }
    for s in samples {
        for (i, beta) in s.beta.iter().enumerate().skip(n0) {
            let mag = beta.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            if mag > 1e-14 {
                return Err(Error::BetaBeyondN0 { component: i, magnitude: mag });
            }
        }
    }
    min_over_samples(samples, |s| {
        let mut worst = f64::INFINITY;
        for beta in s.beta.iter().take(n0) {
            let mut m = s.b.clone();
            m.subtract_outer(n0 as f64 / 2.0, beta);
            worst = worst.min(m.min_eigenvalue());
        }
        Ok(worst)
    })
}

/// Certified margins with argmin locations.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub margin_standard: f64,
    pub argmin_standard: SampleLocation,
    pub margin_strengthened: f64,
    pub argmin_strengthened: SampleLocation,
    /// `(N0, margin, argmin)` when an N0 criterion was requested.
    pub margin_n0: Option<(usize, f64, SampleLocation)>,
    /// Largest `|β_i|` seen at the boundary (second-order monitors want 0).
    pub boundary_noise_transport: f64,
}

pub fn certify(samples: &[CoefficientSample], n0: Option<usize>) -> Result<ConditionReport> {
    let (margin_standard, argmin_standard) = coercivity_margin(samples)?;
    let (margin_strengthened, argmin_strengthened) = strengthened_margin(samples)?;
    let margin_n0 = match n0 {
        Some(k) => {
            let (m, loc) = n0_margin(samples, k)?;
            Some((k, m, loc))
        }
        None => None,
    };
    Ok(ConditionReport {
        margin_standard,
        argmin_standard,
        margin_strengthened,
        argmin_strengthened,
        margin_n0,
        boundary_noise_transport: 0.0,
    })
}

impl ConditionReport {
    /// CSV with the fixed header
    /// `margin,value,argmin_x,argmin_level,argmin_node`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("margin,value,argmin_x,argmin_level,argmin_node\n");
        let _ = writeln!(
            out,
            "standard,{},{},{},{}",
            self.margin_standard,
            self.argmin_standard.x,
            self.argmin_standard.level,
            self.argmin_standard.node
        );
        let _ = writeln!(
            out,
            "strengthened,{},{},{},{}",
            self.margin_strengthened,
            self.argmin_strengthened.x,
            self.argmin_strengthened.level,
            self.argmin_strengthened.node
        );
        if let Some((n0, m, loc)) = &self.margin_n0 {
            let _ = writeln!(out, "n0_{n0},{m},{},{},{}", loc.x, loc.level, loc.node);
        }
        let _ = writeln!(out, "boundary_noise_transport,{},,,", self.boundary_noise_transport);
        out
    }
}

/// Sample the 1-D solver fields into checker samples: every grid node, every
/// time slot, every tree node (one node when the fields are deterministic).
pub fn sample_solver_fields(
    coeffs: &dyn SpdeCoefficients,
    grid: &Grid,
    tree: &NoiseTree,
) -> Vec<CoefficientSample> {
    let n_noise = coeffs.n_noise();
    let mut out = Vec::new();
    let node_counts =
        |level: usize| if coeffs.is_deterministic() { 1 } else { tree.nodes_at(level) };
    for level in 0..=tree.n_steps {
        for node in 0..node_counts(level) {
            let ctx =
                SampleCtx { level, node, t: tree.time(level), w: tree.w_values(level, node) };
            for j in 1..=grid.n_x {
                let x = grid.node(j);
                let mut b = SymMat::zeros(1);
                *b.at_mut(0, 0) = coeffs.diffusion(x, &ctx);
                let beta =
                    (0..n_noise).map(|i| vec![coeffs.noise_transport(i, x, &ctx)]).collect();
                out.push(CoefficientSample {
                    b,
                    beta,
                    location: SampleLocation { x, level, node },
                });
            }
        }
    }
    out
}

/// Full report for a preset on a concrete (grid, tree), including the
/// boundary-transport diagnostic for the solver presets.
pub fn certify_preset(preset: &Preset, grid: &Grid, tree: &NoiseTree) -> Result<ConditionReport> {
    match preset {
        Preset::Example1 => certify(&[example1_sample()], Some(2)),
        _ => {
            let coeffs = preset.solver_coefficients(grid)?;
            let samples = sample_solver_fields(coeffs.as_ref(), grid, tree);
            let mut report = certify(&samples, None)?;
            report.boundary_noise_transport =
                boundary_noise_transport(coeffs.as_ref(), grid, tree);
            Ok(report)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn example1_margins_are_the_known_values() {
        let s = example1_sample();
        let (std_margin, _) = coercivity_margin(core::slice::from_ref(&s)).unwrap();
        assert_relative_eq!(std_margin, 0.01, epsilon = 1e-12);
        let (strong, _) = strengthened_margin(core::slice::from_ref(&s)).unwrap();
        assert_relative_eq!(strong, -0.49, epsilon = 1e-10);
        let (n0m, _) = n0_margin(&[s], 2).unwrap();
        assert_relative_eq!(n0m, -0.49, epsilon = 1e-10);
    }

    #[test]
    fn identity_diffusion_without_noise() {
        let b = SymMat::identity_scaled(3, 1.0);
        let s = CoefficientSample {
            b,
            beta: vec![vec![0.0; 3]; 2],
            location: SampleLocation::ORIGIN,
        };
        let (m, _) = coercivity_margin(core::slice::from_ref(&s)).unwrap();
        assert_relative_eq!(m, 1.0, epsilon = 1e-13);
        // With β = 0 the strengthened margin is the smallest eigenvalue of b.
        let (ms, _) = strengthened_margin(&[s]).unwrap();
        assert_relative_eq!(ms, 1.0, epsilon = 1e-13);
    }

    #[test]
    fn scalar_boundary_case() {
        // n = 1, b = 1, β₁ = √2 → margin exactly 0.
        let mut b = SymMat::zeros(1);
        *b.at_mut(0, 0) = 1.0;
        let s = CoefficientSample {
            b,
            beta: vec![vec![libm::sqrt(2.0)]],
            location: SampleLocation::ORIGIN,
        };
        let (m, _) = coercivity_margin(&[s]).unwrap();
        assert_relative_eq!(m, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn n0_equals_two_block_boundary_case() {
        // n = 1, N = N0 = 2, b = 1, β₁ = β₂ = 1: the N0 margin is 0 and the
        // strengthened block has eigenvalues {0, 1}.
        let mut b = SymMat::zeros(1);
        *b.at_mut(0, 0) = 1.0;
        let s = CoefficientSample {
            b,
            beta: vec![vec![1.0], vec![1.0]],
            location: SampleLocation::ORIGIN,
        };
        let (m, _) = n0_margin(core::slice::from_ref(&s), 2).unwrap();
        assert_relative_eq!(m, 0.0, epsilon = 1e-13);
        let strengthened = s.strengthened_matrix();
        let ev = strengthened.eigenvalues();
        assert_relative_eq!(ev[0], 0.0, epsilon = 1e-13);
        assert_relative_eq!(ev[1], 1.0, epsilon = 1e-13);
    }

    #[test]
    fn n0_rejects_live_trailing_components() {
        let s = example1_sample();
        assert!(matches!(n0_margin(&[s], 1), Err(Error::BetaBeyondN0 { component: 1, .. })));
    }

    #[test]
    fn asymmetric_b_is_rejected() {
        let mut b = SymMat::zeros(2);
        *b.at_mut(0, 1) = 1.0;
        let s = CoefficientSample { b, beta: vec![], location: SampleLocation::ORIGIN };
        assert!(matches!(coercivity_margin(&[s]), Err(Error::NonSymmetricB { .. })));
    }

    #[test]
    fn n_equals_one_margins_coincide() {
        // For n = 1 the standard and strengthened margins agree exactly.
        let mut r = rng::seeded(11);
        for _ in 0..50 {
            let s = random_condition_sample(&mut r, 1, 3);
            let (std_m, _) = coercivity_margin(core::slice::from_ref(&s)).unwrap();
            let (str_m, _) = strengthened_margin(&[s]).unwrap();
            assert_relative_eq!(std_m, str_m, epsilon = 1e-12);
        }
    }

    #[test]
    fn block_identity_matches_direct_quadratic_form() {
        // The strengthened form evaluated directly equals Yᵀ(I_N⊗b − ½ββᵀ)Y.
        let mut r = rng::seeded(5);
        for _ in 0..20 {
            let s = random_condition_sample(&mut r, 3, 2);
            let m = s.strengthened_matrix();
            let n = 3;
            let y: Vec<f64> = (0..n * 2).map(|_| rng::symmetric(&mut r)).collect();
            // Direct evaluation: Σ y_iᵀ b y_i − ½(Σ y_iᵀ β_i)².
            let mut direct = 0.0;
            let mut cross = 0.0;
            for i in 0..2 {
                let yi = &y[i * n..(i + 1) * n];
                for (a, ya) in yi.iter().enumerate() {
                    for (bidx, yb) in yi.iter().enumerate() {
                        direct += ya * s.b.at(a, bidx) * yb;
                    }
                }
                let dot: f64 = yi.iter().zip(&s.beta[i]).map(|(a, b)| a * b).sum();
                cross += dot;
            }
            direct -= 0.5 * cross * cross;
            let via_matrix = m.quadratic_form(&y);
            assert_relative_eq!(direct, via_matrix, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn n0_with_one_component_is_the_standard_margin() {
        let mut r = rng::seeded(13);
        for _ in 0..30 {
            let s = random_condition_sample(&mut r, 2, 1);
            let (std_m, _) = coercivity_margin(core::slice::from_ref(&s)).unwrap();
            let (n0_m, _) = n0_margin(core::slice::from_ref(&s), 1).unwrap();
            assert_relative_eq!(std_m, n0_m, epsilon = 1e-12);
        }
    }

    #[test]
    fn finite_difference_derivative_matches_closed_form() {
        let grid = Grid::new(0.0, 1.0, 16).unwrap();
        let closed = DriftfulCoefficients { lo: 0.0, len: 1.0 };
        let fd = FiniteDifferenceDx { inner: &closed, step: grid.h / 2.0 };
        let ctx = SampleCtx::deterministic(0, 0.0);
        for j in 1..=grid.n_x {
            let x = grid.node(j);
            // The driftful diffusion is quadratic in x, so the centered
            // difference is exact up to roundoff.
            assert_relative_eq!(
                fd.diffusion_dx(x, &ctx),
                closed.diffusion_dx(x, &ctx),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn preset_parsing() {
        assert_eq!(Preset::parse("heat", None).unwrap(), Preset::Heat);
        assert_eq!(
            Preset::parse("random", Some(42)).unwrap(),
            Preset::Random { seed: 42 }
        );
        assert!(Preset::parse("nope", None).is_err());
        let g = Grid::new(0.0, 1.0, 8).unwrap();
        assert!(matches!(
            Preset::Example1.solver_coefficients(&g),
            Err(Error::UnsupportedDimension { n: 2 })
        ));
    }

    #[test]
    fn solver_presets_have_positive_margins() {
        let g = Grid::new(0.0, 1.0, 16).unwrap();
        let t = NoiseTree::new(2, 3, 1.0).unwrap();
        for preset in [Preset::Heat, Preset::Driftful, Preset::Transport, Preset::NearDegenerate]
        {
            let report = certify_preset(&preset, &g, &t).unwrap();
            assert!(
                report.margin_strengthened > 0.0,
                "{} margin {}",
                preset.name(),
                report.margin_strengthened
            );
            assert!(report.margin_standard >= report.margin_strengthened - 1e-12);
            assert!(report.boundary_noise_transport < 1e-13);
        }
    }
}
