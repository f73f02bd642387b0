//! Shared fixtures for the benchmarks.

use asymnet_core::features::synth_generate;
use asymnet_core::trainer::{batch_for, BatchSample};
use asymnet_core::{Dataset, Model, ModelConfig, Rng, SynthConfig};

/// Default-shaped synthetic data (dim 64, 32 frames) at a chosen size.
pub fn dataset(n_traj: usize, gallery_size: usize) -> Dataset {
    synth_generate(&SynthConfig {
        n_traj,
        gallery_size,
        n_categories: 1,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config")
}

pub fn model(ds: &Dataset, hidden_dim: usize) -> Model {
    let cfg = ModelConfig {
        hidden_dim,
        ..ModelConfig::default()
    };
    Model::init(&cfg, ds.dim(), 1).expect("valid model config")
}

/// The first `n` trajectories with `s` positives and negatives each.
pub fn batch(ds: &Dataset, n: usize, s: usize) -> BatchSample {
    let trajs: Vec<usize> = (0..n).collect();
    batch_for(ds, &trajs, s, &mut Rng::seed_from_u64(1)).expect("enough gallery items")
}
