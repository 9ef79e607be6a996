//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use std::path::Path;

use vtbr::config::RunConfig;
use vtbr::model::ModelConfig;

/// The toy configuration shrunk to a few seconds of work.
pub fn small_config(out: &Path, seed: u64) -> RunConfig {
    let mut c = RunConfig::toy();
    c.seed = seed;
    c.out = out.to_path_buf();
    c.data.population.identities = 24;
    c.data.population.cameras = 2;
    c.split.shots = 2;
    c.model.stem_channels = 4;
    c.model.stage_channels = vec![8];
    c.model.hidden = 16;
    c.model.heads = 2;
    c.model.ffn = 32;
    c.pretrain.total_steps = 6;
    c.pretrain.warmup_steps = 2;
    c.pretrain.batch_size = 4;
    c.pretrain.eval_every = 3;
    c.finetune.p = 4;
    c.finetune.k = 2;
    c.finetune.steps = 2;
    c.eval.saliency_images = 2;
    c.propagate_seed();
    c
}

/// Tiny caption model used by gradient and checkpoint tests.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 8,
        stem_channels: 4,
        stage_channels: vec![6],
        hidden: 8,
        layers: 1,
        heads: 2,
        ffn: 16,
        vocab_size: 12,
        max_len: 12,
    }
}
