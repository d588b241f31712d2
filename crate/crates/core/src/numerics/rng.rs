use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{numel, Tensor};

/// Seeded, counter-based random stream (ChaCha8).
///
/// Independent streams are addressed by `(seed, stream)`; the same pair always
/// yields the same draws regardless of platform or scheduling.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, 0)
    }

    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngState { seed, stream, rng }
    }

    /// A child stream whose identity mixes this stream's id with `tag`.
    pub fn fork(&self, tag: u64) -> Self {
        let stream = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(tag.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
        Self::derive(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let data = (0..numel(shape)).map(|_| std * self.normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

/// I.i.d. `U(-1/2, 1/2)` noise of the given shape.
pub fn uniform_noise(shape: &[usize], rng: &mut RngState) -> Tensor {
    let data = (0..numel(shape)).map(|_| rng.uniform() - 0.5).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
