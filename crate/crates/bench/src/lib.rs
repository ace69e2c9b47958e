//! Deterministic fixtures shared by the benchmarks.

use fedmoe_core::model::{MemoryMode, OptimizerKind, TokenBatch};
use fedmoe_core::rng::substream;
use fedmoe_core::{ActivationProfile, ModelConfig, MoeModel};
use ndarray::Array2;

pub const ADAM: MemoryMode = MemoryMode::Train(OptimizerKind::Adam);

pub fn model(cfg: &ModelConfig, seed: u64) -> MoeModel {
    MoeModel::init(cfg, &mut substream(seed, "bench", &[])).expect("valid bench config")
}

/// A `batch × seq_len` token batch and targets spread over the vocabulary.
pub fn batch(cfg: &ModelConfig, batch: usize, seq_len: usize) -> (TokenBatch, Vec<usize>) {
    let tokens = Array2::from_shape_fn((batch, seq_len), |(b, t)| (b * 7 + t * 13) % cfg.vocab_size);
    let targets = (0..batch).map(|b| b % cfg.num_classes).collect();
    (tokens, targets)
}

/// A skewed row-stochastic profile over the full expert grid.
pub fn profile(cfg: &ModelConfig, client_id: usize) -> ActivationProfile {
    let (l, e) = (cfg.num_layers, cfg.experts_per_layer);
    let mut probs = Array2::from_shape_fn((l, e), |(i, j)| 1.0 + ((i * 5 + j * 3 + client_id) % e) as f64);
    for mut row in probs.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    ActivationProfile { client_id, probs, counts: None, token_count: 1 }
}
