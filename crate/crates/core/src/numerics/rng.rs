//! Counter-based random streams.
//!
//! A draw is a pure function of `(seed, purpose, iteration, worker, tensor
//! name, element index)`. Workers can ternarize in any order, on any thread,
//! over any transport, and still produce the same bits.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Streams with different purposes never overlap
/// even when every other key component matches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    /// Worker-side Bernoulli draws for ternarization.
    Ternarize = 1,
    /// Server-side re-quantization onto a shared scaler.
    ShareScaler = 2,
    /// Parameter initialization.
    Init = 3,
    /// Synthetic dataset generation.
    Data = 4,
    /// Free-form draws for tests and benchmarks.
    Other = 5,
}

/// Seed holder that hands out keyed, independent ChaCha8 streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
}

/// The key identifying one stream within a seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamKey<'a> {
    pub purpose: Purpose,
    pub iteration: u64,
    pub worker: u64,
    pub tensor: &'a str,
    /// Index of the first element this stream will be used for.
    pub element_base: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Opens the stream for `key`, positioned at `key.element_base`.
    ///
    /// Each element consumes exactly one 64-bit draw, so opening at base `b`
    /// and skipping `k` draws is identical to opening at base `b + k`.
    pub fn open(&self, key: &StreamKey<'_>) -> ElementRng {
        let mut seed_bytes = [0u8; 32];
        let mut state = self.seed;
        for chunk in seed_bytes.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);

        let mut h = fnv1a(key.tensor.as_bytes());
        h = mix(h ^ (key.purpose as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        h = mix(h ^ key.iteration.rotate_left(17));
        h = mix(h ^ key.worker.rotate_left(41));
        rng.set_stream(h);
        rng.set_word_pos(u128::from(key.element_base) * 2);
        ElementRng { inner: rng }
    }

    /// A plain sequential stream for bulk draws (initialization, data).
    pub fn sequential(&self, purpose: Purpose, label: &str) -> ChaCha8Rng {
        self.open(&StreamKey {
            purpose,
            iteration: 0,
            worker: 0,
            tensor: label,
            element_base: 0,
        })
        .inner
    }
}

/// Per-element uniform draws from one keyed stream.
#[derive(Clone, Debug)]
pub struct ElementRng {
    inner: ChaCha8Rng,
}

impl ElementRng {
    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Bernoulli trial that succeeds with probability `p`. `p >= 1` always
    /// succeeds and `p <= 0` never does.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    mix(*state)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(tensor: &str, iteration: u64, worker: u64, base: u64) -> StreamKey<'_> {
        StreamKey {
            purpose: Purpose::Ternarize,
            iteration,
            worker,
            tensor,
            element_base: base,
        }
    }

    fn draws(rng: &mut ElementRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform()).collect()
    }

    #[test]
    fn identical_keys_identical_draws() {
        let s = RngStream::new(7);
        let a = draws(&mut s.open(&key("fc.weight", 3, 1, 0)), 64);
        let b = draws(&mut RngStream::new(7).open(&key("fc.weight", 3, 1, 0)), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn base_offset_is_a_skip() {
        let s = RngStream::new(11);
        let full = draws(&mut s.open(&key("w", 0, 0, 0)), 100);
        let tail = draws(&mut s.open(&key("w", 0, 0, 40)), 60);
        assert_eq!(&full[40..], &tail[..]);
    }

    #[test]
    fn distinct_keys_differ() {
        let s = RngStream::new(1);
        let base = draws(&mut s.open(&key("w", 0, 0, 0)), 8);
        for other in [key("b", 0, 0, 0), key("w", 1, 0, 0), key("w", 0, 1, 0)] {
            assert_ne!(base, draws(&mut s.open(&other), 8));
        }
        assert_ne!(base, draws(&mut RngStream::new(2).open(&key("w", 0, 0, 0)), 8));
    }

    #[test]
    fn uniform_moments() {
        let mut r = RngStream::new(5).open(&key("x", 0, 0, 0));
        let n = 200_000;
        let xs = draws(&mut r, n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.002, "var {var}");
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn bernoulli_edges() {
        let mut r = RngStream::new(9).open(&key("x", 0, 0, 0));
        for _ in 0..1000 {
            assert!(r.bernoulli(1.0));
            assert!(!r.bernoulli(0.0));
        }
    }
}
