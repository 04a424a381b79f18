//! Name-keyed deterministic initialization.
//!
//! Every parameter draws from its own stream seeded by `(seed, name)`, so
//! enabling or disabling one component never shifts the values of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use cvgl_numerics::Tensor;

pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn normal(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = param_rng(seed, name);
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(seed: u64, name: &str, shape: &[usize], bound: f64) -> Tensor {
    let mut rng = param_rng(seed, name);
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Fan-in scaled normal weights.
pub fn fan_in(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    normal(seed, name, shape, 1.0 / (fan_in as f64).sqrt())
}
