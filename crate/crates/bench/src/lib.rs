//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vimkit::ssm::{selectivize, ScanInstance, SsmParams};
use vimkit::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// A selective-scan problem of `l` tokens, `d` channels and `n` states.
pub fn scan_problem(
    l: usize,
    d: usize,
    n: usize,
    seed: u64,
) -> (ScanInstance<f32>, SsmParams<f32>) {
    let mut r = rng(seed);
    let p = SsmParams::init(d, n, &mut r);
    let x = uniform(&[l, d], &mut r);
    let inst = selectivize(&x, &p).expect("consistent shapes");
    (inst, p)
}
