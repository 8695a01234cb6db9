//! Seeded, reproducible random draws for experiments and tests.
//!
//! All randomness in the crate flows through a ChaCha stream cipher RNG with
//! an explicit `u64` seed, so any experiment re-run with the same seed
//! produces bit-identical numbers on every platform.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tree::{AdaptedField, NoiseTree, Slice};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in `[0, 1)` (53-bit mantissa construction).
#[inline]
pub fn unit(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[-1, 1)`.
#[inline]
pub fn symmetric(rng: &mut Rng) -> f64 {
    2.0 * unit(rng) - 1.0
}

pub fn grid_vector(rng: &mut Rng, n_x: usize) -> Vec<f64> {
    (0..n_x).map(|_| symmetric(rng)).collect()
}

/// Random slice at one level: independent values per node and grid index.
pub fn slice(rng: &mut Rng, tree: &NoiseTree, level: usize, n_x: usize) -> Slice {
    let mut s = Slice::zeros(tree, level, n_x);
    for v in s.data.iter_mut() {
        *v = symmetric(rng);
    }
    s
}

/// Random adapted field: independent values per (level, node, grid index).
/// Adaptedness is carried by the container, so any filling is adapted.
pub fn adapted_field(rng: &mut Rng, tree: &NoiseTree, n_x: usize) -> AdaptedField {
    let mut f = AdaptedField::zeros(tree, n_x);
    for level in f.levels.iter_mut() {
        for v in level.iter_mut() {
            *v = symmetric(rng);
        }
    }
    f
}

/// Random terminal variable (leaf slice).
pub fn terminal(rng: &mut Rng, tree: &NoiseTree, n_x: usize) -> Slice {
    slice(rng, tree, tree.n_steps, n_x)
}
