//! Named, seeded random streams.
//!
//! Each consumer (initialization, dropout, augmentation, shuffling, ...)
//! draws from its own stream so that adding draws to one never shifts
//! another.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Dropout,
    Augmentation,
    Shuffle,
    Split,
    Synthetic,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x1,
            Stream::Dropout => 0x2,
            Stream::Augmentation => 0x3,
            Stream::Shuffle => 0x4,
            Stream::Split => 0x5,
            Stream::Synthetic => 0x6,
        }
    }
}

/// A deterministic generator keyed by `(seed, stream, index)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: Stream,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::indexed(seed, stream, 0)
    }

    /// Sub-stream for e.g. one epoch, so per-epoch draws do not depend on
    /// how many values earlier epochs consumed.
    pub fn indexed(seed: u64, stream: Stream, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream.tag());
        rng.set_word_pos(u128::from(index) << 64);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("std must be finite and non-negative")
            .sample(&mut self.rng)
    }

    /// Normal draw rejected and redrawn outside `mean ± 2·std`.
    pub fn truncated_normal(&mut self, mean: f64, std: f64) -> f64 {
        loop {
            let x = self.normal(0.0, 1.0);
            if x.abs() <= 2.0 {
                return mean + std * x;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(7, Stream::Dropout);
        let mut b = RngStream::new(7, Stream::Dropout);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn streams_are_independent() {
        let mut a = RngStream::new(7, Stream::Dropout);
        let mut b = RngStream::new(7, Stream::Init);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);

        let mut e0 = RngStream::indexed(7, Stream::Augmentation, 0);
        let mut e1 = RngStream::indexed(7, Stream::Augmentation, 1);
        assert_ne!(e0.next_u64(), e1.next_u64());
    }

    #[test]
    fn truncation_bound_holds() {
        let mut r = RngStream::new(1, Stream::Init);
        for _ in 0..10_000 {
            assert!(r.truncated_normal(0.0, 0.5).abs() <= 1.0);
        }
    }
}
