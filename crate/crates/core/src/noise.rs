//! Deterministic Gaussian increments from a counter-based generator.
//!
//! Every draw is addressed by `(seed, path, step, factor)` and evaluated
//! statelessly: the ChaCha12 stream for `(seed, path)` is positioned at a
//! fixed word offset derived from `(step, factor)` and two 64-bit words are
//! turned into one standard normal via Box–Muller. Identical keys therefore
//! reproduce identical increments bit-for-bit on one platform, and the same
//! increments can drive both the grid-level simulator and the coordinate SDE.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::scalar::Scalar;

const DOMAIN_TAG: &[u8; 16] = b"curveflow-noise0";

/// Addressable stream of standard-normal draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
    path: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream { seed, path: 0 }
    }

    /// Same seed, independent stream for another simulation path.
    pub fn path(self, path: u64) -> Self {
        NoiseStream { path, ..self }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_id(&self) -> u64 {
        self.path
    }

    /// Standard normal draw for `(step, factor)`.
    pub fn standard_normal(&self, step: u64, factor: u32) -> f64 {
        debug_assert!(step < 1 << 34, "step index exceeds stream addressing");
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.path.to_le_bytes());
        key[16..32].copy_from_slice(DOMAIN_TAG);
        let mut rng = ChaCha12Rng::from_seed(key);
        // Four 32-bit words per draw: two u64 uniforms for Box-Muller.
        let offset = (((step as u128) << 32) | factor as u128) << 2;
        rng.set_word_pos(offset);
        let u = unit_open_closed(rng.next_u64());
        let v = unit_open_closed(rng.next_u64());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }

    /// Brownian increment over a step of length `dt`, i.e. `N(0, dt)`.
    pub fn increment<T: Scalar>(&self, step: u64, factor: u32, dt: T) -> T {
        T::of(self.standard_normal(step, factor)) * dt.sqrt()
    }

    /// The `m` increments of one simulation step.
    pub fn increments<T: Scalar>(&self, step: u64, m: usize, dt: T) -> Vec<T> {
        (0..m).map(|i| self.increment(step, i as u32, dt)).collect()
    }
}

/// Maps a u64 to (0, 1]: 53 mantissa bits, shifted so ln() never sees zero.
fn unit_open_closed(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}
