//! Shared fixtures for the benchmarks.

use ccr_core::data::{synth_dataset, SynthConfig, SynthDataset};
use ccr_core::fusion::FusionConfig;
use ccr_core::model::{Model, ModelConfig};
use ccr_core::trainer::{TrainPair, TrainState};

/// The default desk-scale synthetic corpus.
pub fn corpus() -> SynthDataset {
    synth_dataset(&SynthConfig::default()).expect("default synth config is valid")
}

pub fn model(ds: &SynthDataset) -> Model {
    let dim = ds.pairs[0].1.feature_dim();
    let cfg = ModelConfig {
        fusion: FusionConfig {
            feature_dim: dim,
            vocab_size: ds.vocab.len(),
            ..FusionConfig::default()
        },
        ..ModelConfig::default()
    };
    Model::new(cfg, 0).expect("default model config is valid")
}

pub fn train_pairs(ds: &SynthDataset) -> Vec<TrainPair> {
    ds.pairs
        .iter()
        .map(|(r, v)| TrainPair {
            video: v.clone(),
            query: r.query.clone(),
        })
        .collect()
}

pub fn state(ds: &SynthDataset) -> TrainState {
    TrainState::new(model(ds))
}
