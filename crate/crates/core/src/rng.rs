//! Seeded random streams.
//!
//! All randomness comes from xoshiro256++ generators. Per-sample streams are
//! derived from `(seed, key, step)` so results never depend on the order in
//! which samples are processed.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Clone, Debug)]
pub struct SeededRng(Xoshiro256PlusPlus);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Independent stream for `(seed, key, step)`.
    pub fn stream(seed: u64, key: &str, step: u64) -> Self {
        let mixed = splitmix(seed ^ splitmix(fnv1a(key.as_bytes())) ^ splitmix(step.wrapping_add(0x5bd1)));
        Self::new(mixed)
    }

    pub fn normal<T: Scalar>(&mut self) -> T {
        T::lit(self.0.sample::<f64, _>(StandardNormal))
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(std) * self.normal::<T>()).collect();
        Tensor::new(shape, data).expect("valid shape")
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(lo + (hi - lo) * self.uniform())).collect();
        Tensor::new(shape, data).expect("valid shape")
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
