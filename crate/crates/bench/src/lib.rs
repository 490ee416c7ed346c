//! Benchmarks live in `benches/`; run them with `cargo bench -p tapm-bench`.

use rand::Rng as _;
use tapm_core::rng;
use tapm_core::Tensor;

/// Uniform `[0, 1)` images of shape `[n, 3, 12, 12]`.
pub fn images(n: usize, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let data = (0..n * 432).map(|_| r.random::<f64>()).collect();
    Tensor::new(vec![n, 3, 12, 12], data).expect("shape matches data")
}

/// Random payoff matrix with entries in `[0, 100)`.
pub fn payoff(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::rng(seed);
    (0..m).map(|_| (0..n).map(|_| r.random_range(0.0..100.0)).collect()).collect()
}
