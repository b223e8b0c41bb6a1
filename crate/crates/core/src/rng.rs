use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Stream-id domains, composed with further indices via [`compose`] so that
/// every consumer of randomness owns an independent, reconstructible stream.
pub mod domains {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const ATTACK: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const SAMPLER: u64 = 6;
    pub const FINETUNE: u64 = 7;
}

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Combine id parts into a single stream id. Used to key independent streams
/// by purpose and sample index, e.g. `compose(&[ATTACK_DOMAIN, seed, i])`.
pub fn compose(parts: &[u64]) -> u64 {
    let mut state = 0x243F6A8885A308D3; // pi fraction, arbitrary fixed start
    let mut acc = 0u64;
    for &p in parts {
        state ^= p;
        acc = splitmix64(&mut state);
    }
    acc
}

/// Counter-based deterministic random stream. A stream is fully identified by
/// `(seed, stream)`: reconstructing one and drawing the same count of values
/// reproduces the sequence exactly, independent of any other stream. Distinct
/// stream ids under one seed are statistically independent.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    draws: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut state = seed;
        let w0 = splitmix64(&mut state);
        state ^= stream;
        let words = [
            w0,
            splitmix64(&mut state),
            splitmix64(&mut state),
            splitmix64(&mut state),
        ];
        let mut key = [0u8; 32];
        for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        RngStream {
            seed,
            stream,
            draws: 0,
            rng: ChaCha12Rng::from_seed(key),
        }
    }

    /// Fresh stream keyed under this one, without consuming any draws.
    pub fn substream(&self, child: u64) -> RngStream {
        RngStream::new(self.seed, compose(&[self.stream, child]))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of values drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.draws += 1;
        self.rng.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn normal_tensor(&mut self, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, self.fill_normal(n)).expect("shape/product consistent")
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.rng.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi);
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> Result<u64> {
        if n == 0 {
            return Err(Error::invalid("below", "n must be positive"));
        }
        self.draws += 1;
        Ok(self.rng.random_range(0..n))
    }
}
