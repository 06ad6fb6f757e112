//! Shared inputs for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use structkd::Tensor;

pub fn uniform(seed: u64, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).expect("shape matches data")
}

pub fn variable(seed: u64, shape: &[usize]) -> Tensor {
    uniform(seed, shape, -1.0, 1.0).detach_var()
}
