//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use gmmc::centroids::{generate_opt_means, DEFAULT_SCALE};
use gmmc::data::{synth_mixture, LabeledDataset};
use gmmc::model::GmmcModel;
use gmmc::net::{Activation, Network, NetworkSpec, ParameterVector};
use gmmc::train::{fit, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small random model with every parameter drawn from `U(-w, w)`.
pub fn random_model(rng: &mut ChaCha8Rng, activations: &[Activation], w: f64) -> GmmcModel {
    let classes = rng.random_range(2..=4);
    let input_dim = rng.random_range(1..=5);
    let depth = rng.random_range(0..=2);
    let mut widths: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
    widths.push(rng.random_range(classes - 1..=5));
    let acts = (0..depth)
        .map(|_| activations[rng.random_range(0..activations.len())])
        .collect();
    let spec = NetworkSpec::new(input_dim, widths.clone(), acts, rng.random()).unwrap();
    let n = spec.num_params();
    let values = (0..n).map(|_| rng.random_range(-w..=w)).collect();
    let params = ParameterVector::from_values(&spec, values).unwrap();
    let centroids = generate_opt_means(classes, *widths.last().unwrap(), DEFAULT_SCALE).unwrap();
    GmmcModel::new(Network::new(spec, params).unwrap(), centroids).unwrap()
}

pub fn random_input(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two-class 2D mixture with a held-out split.
pub fn toy_data(seed: u64) -> (LabeledDataset, LabeledDataset) {
    let ds = synth_mixture(2, 2, 200, 0.25, seed).unwrap();
    gmmc::data::split(&ds, 0.2, seed).unwrap()
}

/// A discriminatively trained 2D toy model with estimated `gamma^2`.
pub fn trained_toy(seed: u64) -> (GmmcModel, LabeledDataset) {
    let (train, test) = toy_data(seed);
    let spec = NetworkSpec::mlp(2, &[16], 4, Activation::Tanh, seed).unwrap();
    let model = GmmcModel::new(
        Network::initialized(spec),
        generate_opt_means(2, 4, DEFAULT_SCALE).unwrap(),
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 32,
        learning_rate: 1e-2,
        decay_epochs: vec![],
        seed,
        ..TrainConfig::default()
    };
    let out = fit(model, &train, &test, &cfg, None, &mut ()).unwrap();
    (out.model, test)
}
