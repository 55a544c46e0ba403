//! Splittable, counter-based random streams.
//!
//! A [`SeededRng`] is a ChaCha8 generator keyed by `seed` on a 64-bit
//! `stream`. [`SeededRng::split`] derives a child stream from the parent's
//! `(seed, stream)` identity alone, never from how much of the parent has
//! been consumed, so per-layer, per-replica and per-trial streams come out
//! the same in any execution order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh generator on the sub-stream `index` of this stream.
    pub fn split(&self, index: u64) -> Self {
        let child =
            splitmix64(splitmix64(self.stream) ^ splitmix64(index.wrapping_add(0x5851_f42d)));
        Self::with_stream(self.seed, child)
    }

    /// `split` applied along a path, e.g. `[layer, replica]`.
    pub fn split_path(&self, path: &[u64]) -> Self {
        path.iter().fold(self.clone(), |r, &i| r.split(i))
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        z * std
    }

    pub fn fill_normal(&mut self, out: &mut [f64], std: f64) {
        for v in out {
            let z: f64 = StandardNormal.sample(&mut self.inner);
            *v = z * std;
        }
    }

    /// Bernoulli draw with `P(true) = p`; `p` must lie in `[0, 1]`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        Bernoulli::new(p)
            .map(|d| d.sample(&mut self.inner))
            .unwrap_or(false)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    /// Uniform index in `0..n` (Lemire's multiply-shift, bias below 2^-32 for desk sizes).
    pub fn index(&mut self, n: usize) -> usize {
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
