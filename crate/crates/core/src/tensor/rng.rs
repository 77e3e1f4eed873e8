//! Seeded random source shared by every sampling path in the crate.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deterministic generator (ChaCha8 stream cipher). All draws are produced in
/// `f64` and then rounded to the requested dtype, so a given seed yields the
/// same stream on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; the parent advances by one draw.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.random())
    }

    pub fn normal_f64(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.normal_f64())).collect();
        Tensor::from_vec(shape, data).expect("length follows shape")
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        // rounding to f32 can land on 1.0; keep the interval half-open
        let below_one = T::one() - T::epsilon() / T::lit(2.0);
        let data = (0..n).map(|_| T::from_f64_lossy(self.uniform_f64()).min(below_one)).collect();
        Tensor::from_vec(shape, data).expect("length follows shape")
    }
}

pub fn rand_normal<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    rng.normal(shape)
}

pub fn rand_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    rng.uniform(shape)
}
