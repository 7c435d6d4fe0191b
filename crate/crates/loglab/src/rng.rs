//! Counter-based randomness.
//!
//! Keyed values (box noise, refinement choices, retention uniforms) are a
//! pure hash of their key, so any subset can be evaluated lazily and in any
//! order. Sequential Monte Carlo streams use ChaCha8 with an explicit stream id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Identifies the generator family and key layout; recorded in run reports.
pub const ALGORITHM_VERSION: &str = "loglab-rng/1 splitmix64-fold+chacha8";

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Incremental keyed hash. Every absorbed word passes through a full mixing round.
#[derive(Clone, Copy, Debug)]
pub struct KeyHasher {
    state: u64,
}

impl KeyHasher {
    pub fn new(seed: u64, domain: u64) -> Self {
        KeyHasher { state: mix64(seed ^ mix64(domain.wrapping_add(0x5851_F42D_4C95_7F2D))) }
    }

    #[inline]
    pub fn absorb(&mut self, w: u64) -> &mut Self {
        self.state = mix64(self.state.rotate_left(23) ^ w);
        self
    }

    #[inline]
    pub fn absorb_i64(&mut self, w: i64) -> &mut Self {
        self.absorb(w as u64)
    }

    pub fn absorb_slice(&mut self, ws: &[i64]) -> &mut Self {
        self.absorb(ws.len() as u64);
        for &w in ws {
            self.absorb(w as u64);
        }
        self
    }

    /// Two output words derived from the current state.
    #[inline]
    pub fn words(&self) -> (u64, u64) {
        let a = mix64(self.state ^ 0xA076_1D64_78BD_642F);
        let b = mix64(self.state ^ 0xE703_7ED1_A0B4_28DB);
        (a, b)
    }

    #[inline]
    pub fn finish(&self) -> u64 {
        self.words().0
    }
}

/// Uniform in the open interval (0,1) with about 106 bits near zero.
#[inline]
pub fn uniform_open(w1: u64, w2: u64) -> f64 {
    const SCALE: f64 = 1.0 / 9_007_199_254_740_992.0; // 2^-53
    let hi = (w1 >> 11) as f64;
    let lo = ((w2 >> 11) as f64 + 0.5) * SCALE;
    ((hi + lo) * SCALE).min(1.0 - f64::EPSILON / 2.0)
}

#[inline]
pub fn uniform_from_word(w: u64) -> f64 {
    ((w >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal deviate by inverse CDF of two uniform words.
pub fn normal_from_words(w1: u64, w2: u64) -> f64 {
    let u = uniform_open(w1, w2);
    std_normal().inverse_cdf(u)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Unbiased index in [0, n) from a 64-bit word (multiply-shift).
#[inline]
pub fn index_from_word(w: u64, n: usize) -> usize {
    ((w as u128 * n as u128) >> 64) as usize
}

/// Sequential stream for Monte Carlo loops.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Derives a child seed; used to hand independent seeds to replicas.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    KeyHasher::new(seed, tag).absorb(index).finish()
}
