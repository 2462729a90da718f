//! Shared fixtures for the criterion benchmarks.

use hybridseq::model::{Arch, HybridStackConfig, Model, Prompt};
use hybridseq::numerics::rng;
use hybridseq::{Result, Tensor};

/// Default-width model of the given architecture with a fixed seed.
pub fn model(arch: Arch) -> Result<Model> {
    Model::new(HybridStackConfig { arch, ..HybridStackConfig::default() }, 0)
}

/// Prompt of `m` random video vectors followed by `n` text tokens.
pub fn prompt(model: &Model, m: usize, n: usize) -> Result<Prompt> {
    let cfg = &model.config;
    let video = Tensor::randn([m, cfg.d], 1.0, &mut rng(m as u64));
    Prompt::new(video, (0..n).map(|i| i % cfg.vocab_size).collect())
}
