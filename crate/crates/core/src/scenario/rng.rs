use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The single random stream behind scenario generation.
///
/// ChaCha8 keyed by the 64-bit seed (`seed_from_u64`), consumed only through
/// [`SeededRng::below`] and [`SeededRng::shuffle`], both defined here on top
/// of raw `next_u64` words so the stream does not depend on the sampling
/// algorithms of any particular `rand` release.
///
/// Stream 0 drives calendar generation; stream 1 drives label assignment;
/// stream 2 drives run identifiers.
#[derive(Clone, Debug)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self(inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `0..n` by rejection sampling. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.0.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher–Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn uniform_f64(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}
