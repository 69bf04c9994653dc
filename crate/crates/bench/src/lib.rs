//! Shared fixtures for the benchmarks.

use cmvae_core::data::{pair_random_with, FactorSpec, Generator, PairedDataset};
use cmvae_core::model::{ModelConfig, MultimodalModel};
use cmvae_core::numerics::DenseArray;
use cmvae_core::train::{Experiment, RunConfig, Trainer};

/// Default-size model with fresh weights.
pub fn model() -> MultimodalModel {
    MultimodalModel::new(ModelConfig::default(), 1).expect("default model")
}

/// `n` aligned rows from the default generator.
pub fn batch(n: usize) -> Vec<DenseArray> {
    let g = Generator::new(FactorSpec::default(), 1).expect("generator");
    (0..2).map(|m| g.generate(m, n, 2).expect("pool").obs).collect()
}

/// Randomly mixed tuples over pools of `items` each.
pub fn mixed(items: usize, per_instance: usize) -> PairedDataset {
    let spec = FactorSpec { items_per_modality: items, ..FactorSpec::default() };
    let g = Generator::new(spec, 1).expect("generator");
    pair_random_with(g.generate_all(2).expect("pools"), per_instance, 3).expect("pairing")
}

/// A trainer on 20% of the default data with the default objective.
pub fn trainer() -> Trainer {
    let mut cfg = RunConfig::default();
    cfg.data.percent = 20.0;
    let exp = Experiment::build(&cfg.data).expect("data");
    Trainer::fresh(cfg, exp.train).expect("trainer")
}
