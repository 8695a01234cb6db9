//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors raised by grid construction, tree guards, shape checks, and solvers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Degenerate interval or fewer than two interior points.
    InvalidGrid(String),
    /// Noise tree parameters outside the supported range (`N ∈ {1,2,3}`,
    /// `M ≥ 1`, `N·M ≤ 24`).
    InvalidTree(String),
    /// An input does not match the shape implied by its grid/tree.
    ShapeMismatch { expected: usize, got: usize, what: &'static str },
    /// Level index outside `0..=M`.
    LevelOutOfRange { level: usize, max: usize },
    /// Weighted norm requested with a non-positive weight sample.
    NonPositiveWeight { index: usize, value: f64 },
    /// `NormKind::WeightedH1` needs the weight samples; use
    /// `weighted_h1_seminorm` instead of `discrete_norm`.
    WeightRequired,
    /// Coefficient matrix `b` is not symmetric within tolerance.
    NonSymmetricB { deviation: f64 },
    /// `check_criterion_n0` called with a nonzero `β_i` for `i > N0`.
    BetaBeyondN0 { component: usize, magnitude: f64 },
    /// The spatial dimension is not supported by this operation (the PDE
    /// solver is one-dimensional; condition checkers accept general `n`).
    UnsupportedDimension { n: usize },
    /// A tridiagonal system `(I - Δt·A)` was numerically singular.
    SingularSolve { level: usize, node: usize },
    /// Up-front step-size guard: `Δt · max|λ| ≥ 1` cannot guarantee a
    /// solvable implicit step.
    TimeStepTooLarge { dt_lambda: f64 },
    /// Neumann iteration failed to reach the tolerance.
    NoConvergence { iterations: usize, residual: f64, contraction_estimate: f64 },
    /// A coercivity margin required by an experiment was not positive.
    MarginViolation { margin: f64, what: &'static str },
    /// Free-form validation failure with an actionable message.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidGrid(msg) => write!(f, "invalid grid: {msg}"),
            Error::InvalidTree(msg) => write!(f, "invalid noise tree: {msg}"),
            Error::ShapeMismatch { expected, got, what } => {
                write!(f, "shape mismatch for {what}: expected {expected}, got {got}")
            }
            Error::LevelOutOfRange { level, max } => {
                write!(f, "level {level} out of range 0..={max}")
            }
            Error::NonPositiveWeight { index, value } => {
                write!(f, "weight sample {index} is not positive: {value}")
            }
            Error::WeightRequired => {
                write!(f, "weighted H1 norm needs weight samples; call weighted_h1_seminorm")
            }
            Error::NonSymmetricB { deviation } => {
                write!(f, "coefficient matrix b is not symmetric (max deviation {deviation:e})")
            }
            Error::BetaBeyondN0 { component, magnitude } => {
                write!(f, "β_{component} must vanish beyond N0 but has magnitude {magnitude:e}")
            }
            Error::UnsupportedDimension { n } => {
                write!(f, "spatial dimension n = {n} not supported here (solver is 1-D)")
            }
            Error::SingularSolve { level, node } => {
                write!(f, "singular implicit step at level {level}, node {node}")
            }
            Error::TimeStepTooLarge { dt_lambda } => {
                write!(f, "Δt·max|λ| = {dt_lambda} ≥ 1; refine the time grid")
            }
            Error::NoConvergence { iterations, residual, contraction_estimate } => {
                write!(
                    f,
                    "no convergence after {iterations} iterations (residual {residual:e}, \
                     estimated contraction {contraction_estimate})"
                )
            }
            Error::MarginViolation { margin, what } => {
                write!(f, "{what} requires a positive margin, got {margin}")
            }
            Error::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
