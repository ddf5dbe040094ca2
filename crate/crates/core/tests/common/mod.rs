//! Small configurations and datasets shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use vpd::config::RunConfig;
use vpd::encoder::EncoderSpec;
use vpd::synth::{generate_dataset, DatasetSpec};
use vpd::vpt::Dataset;

/// A model small enough to train a few steps in well under a second.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::preset("desk").unwrap();
    let f = 4;
    cfg.encoder = EncoderSpec {
        unet_channels: vec![4, 8, 4, f],
        pool_levels: 1,
        feature_dim: f,
        particle_budget: 64,
        predict_depth: false,
        depth_prior: 2.5,
    };
    let d = &mut cfg.dynamics;
    d.latent = 8;
    d.message_steps = 1;
    d.mlp_layers = 1;
    d.decoder_layers = 1;
    d.feature_dim = f;
    let r = &mut cfg.renderer;
    r.trunk_layers = 2;
    r.trunk_width = 16;
    r.head_width = 8;
    r.n_coarse = 4;
    r.n_fine = 4;
    r.knn = 4;
    r.feature_dim = f;
    let t = &mut cfg.train;
    t.rollout_steps = 2;
    t.rays_per_step = 8;
    t.batch_size = 2;
    t.views = 2;
    t.eval_every = 0;
    t.checkpoint_every = 1;
    t.sequential_samples = 32;
    cfg.validate().unwrap();
    cfg
}

pub fn tiny_dataset(root: &Path) -> Dataset {
    let spec = DatasetSpec {
        trajectories: 2,
        heldout: 1,
        views: 2,
        steps: 8,
        width: 16,
        height: 16,
        seed: 3,
        ..DatasetSpec::default()
    };
    generate_dataset(&spec, root).unwrap()
}

/// Metrics records without the wall-clock column.
pub fn metrics_without_time(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(1);
            f.join(",")
        })
        .collect()
}
