#![allow(dead_code)]

use lfads_core::model::LfadsConfig;
use lfads_core::synth::{build_dataset, DatasetSpec, SpikeDataset, System};
use lfads_forge::trainer::TrainerConfig;

pub fn tiny_spec(conditions: usize, trials: usize, train: usize) -> DatasetSpec {
    let mut spec = DatasetSpec::lorenz();
    spec.conditions = conditions;
    spec.trials_per_condition = trials;
    spec.train_per_condition = train;
    spec.steps = 20;
    if let System::Lorenz(p) = &mut spec.system {
        p.n_neurons = 5;
    }
    spec
}

pub fn tiny_dataset(seed: u64) -> SpikeDataset {
    build_dataset(&tiny_spec(4, 5, 4), seed).unwrap()
}

pub fn tiny_model(ds: &SpikeDataset, inputs: usize) -> LfadsConfig {
    LfadsConfig {
        data_dim: ds.neurons(),
        steps: ds.steps(),
        factors_dim: 3,
        generator_dim: 12,
        encoder_dim: 10,
        input_encoder_dim: 8,
        controller_dim: 8,
        inferred_input_dim: inputs,
        posterior_samples: 4,
        input_posterior_samples: 4,
        ..LfadsConfig::default()
    }
}

pub fn tiny_trainer(seed: u64) -> TrainerConfig {
    TrainerConfig {
        seed,
        batch_size: 6,
        max_epochs: 1000,
        ..TrainerConfig::default()
    }
}
