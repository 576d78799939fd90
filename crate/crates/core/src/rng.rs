//! Named, seeded random streams.
//!
//! A stream is fully determined by `(seed, label)`: the ChaCha key is the
//! SHA-256 digest of the little-endian seed followed by the label bytes, so
//! draw sequences do not depend on platform, thread or call order elsewhere.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: String,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: impl Into<String>) -> Self {
        let stream = stream.into();
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(stream.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            seed,
            stream,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Derives an independent stream `"<stream>/<label>"` from the same seed.
    pub fn substream(&self, label: impl std::fmt::Display) -> Self {
        Self::new(self.seed, format!("{}/{}", self.stream, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> &str {
        &self.stream
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the range is empty.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            lo
        } else {
            lo + (hi - lo) * self.uniform()
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.inner);
    }

    /// A uniformly shuffled `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }
}
