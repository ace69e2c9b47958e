//! Client-side training and evaluation.

use crate::data::{sample_batch, to_batch, BatchCursor, Sample};
use crate::error::Result;
use crate::model::{forward, MoeModel, TrainConfig, Trainer};

/// Train for `epochs` passes over `shard`; returns the mean pre-step loss
/// (NaN when no step ran).
pub fn local_train(
    model: &mut MoeModel,
    shard: &[Sample],
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
    proximal: Option<(f64, &MoeModel)>,
) -> Result<f64> {
    let mut trainer = Trainer::new(cfg);
    if let Some((mu, anchor)) = proximal {
        trainer = trainer.with_proximal(mu, anchor);
    }
    let mut cursor = BatchCursor::new(shard.len(), seed);
    let steps = epochs * cursor.batches_per_epoch(cfg.batch_size);
    let mut total = 0.0;
    for _ in 0..steps {
        let (tokens, labels) = sample_batch(shard, cfg.batch_size, &mut cursor);
        total += trainer.step(model, &tokens, &labels)?.total;
    }
    Ok(if steps == 0 { f64::NAN } else { total / steps as f64 })
}

/// Train for a fixed number of steps (used for pre-training).
pub fn train_steps(model: &mut MoeModel, shard: &[Sample], cfg: &TrainConfig, steps: usize, seed: u64) -> Result<f64> {
    let mut trainer = Trainer::new(cfg);
    let mut cursor = BatchCursor::new(shard.len(), seed);
    let mut last = f64::NAN;
    for _ in 0..steps {
        let (tokens, labels) = sample_batch(shard, cfg.batch_size, &mut cursor);
        last = trainer.step(model, &tokens, &labels)?.total;
    }
    Ok(last)
}

/// Classification accuracy in `[0, 1]`.
pub fn accuracy(model: &MoeModel, shard: &[Sample]) -> Result<f64> {
    if shard.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..shard.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(128) {
        let (tokens, labels) = to_batch(shard, chunk);
        let out = forward(model, &tokens)?;
        for (row, &y) in out.logits.rows().into_iter().zip(&labels) {
            if crate::model::forward::argmax_lowest(row) == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / shard.len() as f64)
}
