//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit value derived from a
//! parent seed and a string tag, so components never share state and the
//! draws do not depend on call order elsewhere in the program.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Key for the substream `(seed, tag)`.
pub fn substream_key(seed: u64, tag: &str) -> u64 {
    mix64(mix64(seed) ^ fnv1a(tag))
}

pub struct Stream {
    key: u64,
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, tag: &str) -> Self {
        let key = substream_key(seed, tag);
        Self { key, rng: ChaCha8Rng::seed_from_u64(key) }
    }

    /// Child stream keyed by this stream's key, a tag and an index.
    pub fn child(&self, tag: &str, index: u64) -> Self {
        Self::new(mix64(self.key ^ mix64(index)), tag)
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal by Box–Muller (cosine branch only).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Student-t with `nu` degrees of freedom: `Z / sqrt(chi2_nu / nu)`,
    /// the chi-square built from `nu` squared normals (integer `nu`).
    pub fn student_t(&mut self, nu: u32) -> f64 {
        let z = self.gaussian();
        let chi2: f64 = (0..nu).map(|_| self.gaussian().powi(2)).sum();
        z / (chi2 / nu as f64).sqrt()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut s = Stream::new(7, "A");
            (0..4).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = Stream::new(7, "A");
            (0..4).map(|_| s.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut s = Stream::new(7, "B");
            (0..4).map(|_| s.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments() {
        let mut s = Stream::new(1, "g");
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn student_t_variance() {
        // Var t_nu = nu / (nu - 2); nu = 8 keeps the fourth moment finite.
        let mut s = Stream::new(2, "t");
        let n = 200_000;
        let var = (0..n).map(|_| s.student_t(8).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 8.0 / 6.0).abs() < 0.03);
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut s = Stream::new(3, "p");
        let mut p = s.permutation(50);
        p.sort();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
