//! Deterministic random streams.
//!
//! Every random quantity in a simulation is drawn from a [`RandomStream`]
//! obtained by [`RandomStream::substream`]. The derivation is counter based:
//! the master seed is expanded with SplitMix64 into a 256-bit ChaCha key,
//! and the pair `(trial, purpose)` selects the ChaCha stream id as
//! `trial << 8 | purpose`. Streams for different trials or purposes never
//! overlap, so trials can be executed in any order and on any thread.

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Tag identifying what a substream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Activity = 1,
    Topology = 2,
    Fading = 3,
    Pilots = 4,
    Noise = 5,
    Bits = 6,
    Protocol = 7,
    StateEvolution = 8,
    Shuffle = 9,
}

#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn expand_key(seed: u64) -> [u8; 32] {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

impl RandomStream {
    /// Stream 0 under `seed`. Intended for one-off uses such as tests.
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::from_seed(expand_key(seed)),
        }
    }

    /// Independent substream for `(trial, purpose)` under the master seed.
    pub fn substream(master_seed: u64, trial: u64, purpose: Purpose) -> Self {
        assert!(trial < (1 << 56), "trial index exceeds the 56-bit stream space");
        let mut rng = ChaCha8Rng::from_seed(expand_key(master_seed));
        rng.set_stream((trial << 8) | purpose as u64);
        Self { rng }
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.uniform() < p
        }
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Circularly-symmetric complex Gaussian with `E|z|^2 = variance`.
    pub fn complex_normal(&mut self, variance: f64) -> Complex64 {
        let s = (0.5 * variance).sqrt();
        let re = self.standard_normal();
        let im = self.standard_normal();
        Complex64::new(s * re, s * im)
    }

    /// `k` distinct indices from `0..n`, in draw order (partial Fisher-Yates).
    pub fn distinct_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        if k * 4 < n {
            let mut out = Vec::with_capacity(k);
            while out.len() < k {
                let v = self.index(n);
                if !out.contains(&v) {
                    out.push(v);
                }
            }
            out
        } else {
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let j = i + self.index(n - i);
                pool.swap(i, j);
            }
            pool.truncate(k);
            pool
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_reproducible() {
        let mut a = RandomStream::substream(7, 3, Purpose::Noise);
        let mut b = RandomStream::substream(7, 3, Purpose::Noise);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_differ_by_trial_and_purpose() {
        let x = RandomStream::substream(7, 3, Purpose::Noise).next_u64();
        let y = RandomStream::substream(7, 4, Purpose::Noise).next_u64();
        let z = RandomStream::substream(7, 3, Purpose::Fading).next_u64();
        let w = RandomStream::substream(8, 3, Purpose::Noise).next_u64();
        assert_ne!(x, y);
        assert_ne!(x, z);
        assert_ne!(x, w);
    }

    #[test]
    fn complex_normal_variance() {
        let mut s = RandomStream::new(1);
        let n = 200_000;
        let mean_pow: f64 = (0..n).map(|_| s.complex_normal(2.0).norm_sqr()).sum::<f64>() / n as f64;
        // |z|^2 ~ Exp(mean 2): std of the mean is 2/sqrt(n).
        assert!((mean_pow - 2.0).abs() < 3.0 * 2.0 / (n as f64).sqrt() * 1.5);
    }

    #[test]
    fn distinct_indices_are_distinct() {
        let mut s = RandomStream::new(5);
        for (n, k) in [(10, 10), (200, 3), (50, 20)] {
            let mut v = s.distinct_indices(n, k);
            v.sort_unstable();
            v.dedup();
            assert_eq!(v.len(), k);
            assert!(v.iter().all(|&i| i < n));
        }
    }
}
