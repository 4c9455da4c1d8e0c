// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use mipc_core::numerics::{Scalar, SeededRng};
use mipc_core::transformer::{ModelConfig, Parameters};

pub fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 8,
        n_ctx: 10,
        vocab_size: vocab,
        ..ModelConfig::desk(vocab)
    }
}

/// Every tensor drawn at random, layer norms and biases included, so no
/// path through the model is trivially zero or identity.
pub fn random_params<T: Scalar>(config: &ModelConfig, seed: u64, std: f64) -> Parameters<T> {
    let mut p = Parameters::zeros(config);
    let mut rng = SeededRng::new(seed);
    for (name, _, t) in p.tensors_mut() {
        let gain = name.ends_with("gamma");
        for x in t.data_mut() {
            let r = rng.normal(0.0, std);
            *x = T::of(if gain { 1.0 + r } else { r });
        }
    }
    p
}

pub fn random_tokens(rng: &mut SeededRng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.next_below(vocab as u64) as usize).collect()
}
