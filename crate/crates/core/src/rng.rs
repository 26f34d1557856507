//! Reproducible random streams.
//!
//! Every stochastic site (initialization, dropout, layer masks, character
//! dropout, batch shuffling) owns its own [`RngStream`]. A stream is a ChaCha8
//! keystream addressed by `(seed, stream id, word position)`, so a draw
//! sequence is fully determined by those three numbers on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream identifiers used by the model and trainer.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const LAYER_MASK: u64 = 3;
    pub const CHAR_DROPOUT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// An independent stream sharing this stream's seed.
    pub fn split(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Position in the keystream, in 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Repositions the stream; `(seed, stream, counter)` fixes all later draws.
    pub fn seek(&mut self, counter: u128) {
        self.rng.set_word_pos(counter);
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.gen::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Returns `true` with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = RngStream::new(7, 2);
        let mut b = RngStream::new(7, 2);
        let xa: Vec<f64> = (0..100).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..100).map(|_| b.uniform()).collect();
        assert_eq!(xa, xb);
        assert_eq!(a.counter(), b.counter());
    }

    #[test]
    fn streams_are_independent() {
        let mut a = RngStream::new(7, 2);
        let mut b = a.split(3);
        assert_ne!(a.uniform(), b.uniform());
    }

    #[test]
    fn seek_replays_draws() {
        let mut a = RngStream::new(11, 1);
        a.uniform();
        let pos = a.counter();
        let first: Vec<f64> = (0..10).map(|_| a.uniform()).collect();
        a.seek(pos);
        let again: Vec<f64> = (0..10).map(|_| a.uniform()).collect();
        assert_eq!(first, again);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut a = RngStream::new(0, 0);
        for _ in 0..10_000 {
            let u = a.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
