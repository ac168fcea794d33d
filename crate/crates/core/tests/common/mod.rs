#![allow(dead_code)]

pub mod gradcheck;
pub mod planted;

use linmlp::model::{Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Model with every parameter drawn at random, including LN gains and
/// biases, so no term of the forward pass is trivially zero.
pub fn scrambled(config: ModelConfig, seed: u64, scale: f64) -> Model<f64> {
    let mut m = Model::<f64>::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in m.params.iter_mut() {
        let centre = if name.ends_with(".weight") { 1.0 } else { 0.0 };
        for v in t.data.iter_mut() {
            *v = centre + scale * rng.random_range(-1.0..1.0);
        }
    }
    m
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}
