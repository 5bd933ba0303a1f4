#![allow(dead_code)]

use mutguard::nn::{Activation, DenseLayer, Network};
use mutguard::seed::rng;
use rand::Rng;

/// Random dense net with ReLU hidden layers; layer sizes drawn from `sizes`
/// bounds, parameters from U(-1, 1).
pub fn random_net(seed: u64, sizes: &[usize]) -> Network {
    let mut r = rng(seed);
    let layers = sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let last = i + 2 == sizes.len();
            DenseLayer::new(
                w[0],
                w[1],
                (0..w[0] * w[1]).map(|_| r.gen_range(-1.0..1.0)).collect(),
                (0..w[1]).map(|_| r.gen_range(-0.5..0.5)).collect(),
                if last { Activation::Identity } else { Activation::Relu },
            )
            .unwrap()
        })
        .collect();
    Network::new(layers).unwrap()
}

pub fn random_input(seed: u64, dim: usize) -> Vec<f64> {
    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..dim).map(|_| r.gen_range(0.0..1.0)).collect()
}

/// Per-layer rows as owned vectors.
pub fn rows(layer: &DenseLayer) -> Vec<Vec<f64>> {
    (0..layer.out_dim()).map(|u| layer.row(u).to_vec()).collect()
}
