//! Counter-based, splittable random streams.
//!
//! A stream is addressed by `(seed, stream, counter)`. The seed keys a ChaCha8
//! generator, the stream id selects one of its 2^64 non-overlapping
//! keystreams, and the counter is the word position inside that keystream.
//! Child streams are derived by mixing a tag into the parent stream id, so a
//! consumer can own its randomness without perturbing its siblings.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Well-known stream tags used by the sampler and its variants.
pub mod tags {
    pub const GUMBEL: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const DIFFERENTIAL: u64 = 3;
    pub const ZIGZAG: u64 = 4;
    pub const SOLVER: u64 = 5;
    pub const INIT: u64 = 6;
    pub const CALIB: u64 = 7;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::at(seed, stream, 0)
    }

    /// Positions the stream at an absolute word counter.
    pub fn at(seed: u64, stream: u64, counter: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos(counter as u128);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Child stream keyed by `tag`, starting at counter zero. Independent of
    /// how much of `self` has been consumed.
    pub fn derive(&self, tag: u64) -> RngStream {
        let child = splitmix64(self.stream ^ splitmix64(tag.wrapping_add(GOLDEN)));
        RngStream::new(self.seed, child)
    }

    /// Shorthand for a chain of [`derive`](Self::derive) calls.
    pub fn derive_path(&self, path: &[u64]) -> RngStream {
        path.iter().fold(self.clone(), |s, &t| s.derive(t))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform index in `0..n` (n > 0).
    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

impl RngCore for RngStream {
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
    fn same_address_same_draws() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..1_000_000 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 8);
        let differs = (0..10_000).any(|_| a.uniform() != b.uniform());
        assert!(differs);
    }

    #[test]
    fn counter_resumes() {
        let mut a = RngStream::new(3, 1);
        for _ in 0..17 {
            a.next_u64();
        }
        let c = a.counter();
        let mut b = RngStream::at(3, 1, c);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn derive_ignores_parent_position() {
        let root = RngStream::new(9, 0);
        let mut used = root.clone();
        used.next_u64();
        let mut x = root.derive(tags::GUMBEL);
        let mut y = used.derive(tags::GUMBEL);
        assert_eq!(x.next_u64(), y.next_u64());
        assert_ne!(root.derive(1).stream(), root.derive(2).stream());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = RngStream::new(1, 1);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
