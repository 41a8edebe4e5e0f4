//! Seeded, counter-based random stream.
//!
//! The generator is SplitMix64 evaluated at a counter: the `i`-th output
//! (starting at `i = 0`) of a stream with seed `s` is
//!
//! ```text
//! z   = s + (i + 1) * 0x9E3779B97F4A7C15            (wrapping)
//! z   = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9         (wrapping)
//! z   = (z ^ (z >> 27)) * 0x94D049BB133111EB         (wrapping)
//! out = z ^ (z >> 31)
//! ```
//!
//! Derived quantities:
//! - `uniform()` = `(out >> 11) * 2^-53`, in `[0, 1)`.
//! - `gaussian()` consumes two outputs `a`, `b` and returns
//!   `sqrt(-2 ln(1 - uniform(a))) * cos(2π · uniform(b))` (Box–Muller, cosine branch only).
//! - `below(n)` = `(out as u128 * n) >> 64` (multiply-shift, no rejection).
//!
//! Any reimplementation of these lines reproduces every stream in this crate bit-for-bit.

use sha2::{Digest as _, Sha256};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output mixer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a parent seed, a label and an index.
///
/// `child = u64_le(SHA-256(label bytes ‖ u64_le(seed) ‖ u64_le(index))[0..8])`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&out[..8]);
    u64::from_le_bytes(first)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
    counter: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Number of raw outputs consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }
}
