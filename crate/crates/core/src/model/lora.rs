//! Low-rank adapters on expert FFN matrices for memory-light fine-tuning.
//!
//! While adapters are attached, only the adapter factors and the routers are
//! trainable; every other tensor is frozen.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{ExpertLora, LoraAdapter, MoeModel};
use crate::error::{Error, Result};

fn adapter<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, rank: usize) -> LoraAdapter {
    let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("finite std");
    LoraAdapter {
        a: Array2::from_shape_fn((rows, rank), |_| dist.sample(rng)),
        b: Array2::zeros((rank, cols)),
    }
}

/// Attach rank-`rank` adapters to both matrices of every expert. `B` starts at
/// zero so the attached model computes exactly what the base model computes.
pub fn attach_lora<R: Rng + ?Sized>(model: &mut MoeModel, rank: usize, rng: &mut R) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("lora rank must be >= 1".into()));
    }
    if model.has_lora() {
        return Err(Error::Structural("adapters already attached".into()));
    }
    for layer in &mut model.layers {
        for e in &mut layer.experts {
            let (d, h) = e.w1.dim();
            e.lora = Some(ExpertLora {
                w1: adapter(rng, d, h, rank),
                w2: adapter(rng, h, d, rank),
            });
        }
    }
    Ok(())
}

/// Fold `A·B` into the base weights and drop the adapters.
pub fn merge_lora(model: &mut MoeModel) {
    for layer in &mut model.layers {
        for e in &mut layer.experts {
            if let Some(l) = e.lora.take() {
                e.w1 += &l.w1.delta();
                e.w2 += &l.w2.delta();
            }
        }
    }
}

/// Trainable values one adapter adds to a `rows × cols` matrix.
pub fn adapter_param_count(rows: usize, cols: usize, rank: usize) -> usize {
    rank * (rows + cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ModelConfig, TrainConfig};
    use crate::model::forward::forward;
    use crate::model::train::Trainer;
    use crate::rng::substream;
    use ndarray::array;

    fn model() -> MoeModel {
        let cfg = ModelConfig {
            num_layers: 2,
            experts_per_layer: 3,
            embed_dim: 8,
            hidden_dim: 16,
            vocab_size: 10,
            num_classes: 3,
            bytes_per_param: 4,
            expert_bias: true,
        };
        MoeModel::init(&cfg, &mut substream(5, "init", &[])).unwrap()
    }

    #[test]
    fn zero_b_attach_then_merge_is_bitwise_identity() {
        let base = model();
        let mut m = base.clone();
        attach_lora(&mut m, 4, &mut substream(5, "lora", &[])).unwrap();
        let tokens = array![[1, 2, 3], [7, 8, 9]];
        assert_eq!(forward(&m, &tokens).unwrap().logits, forward(&base, &tokens).unwrap().logits);
        merge_lora(&mut m);
        assert_eq!(m, base);
    }

    #[test]
    fn rank_four_adapter_count() {
        assert_eq!(adapter_param_count(8, 16, 4), 96);
        let mut m = model();
        let (total, _) = m.param_counts();
        attach_lora(&mut m, 4, &mut substream(5, "lora", &[])).unwrap();
        let (with, trainable) = m.param_counts();
        // 6 experts × 2 adapted matrices × 96.
        assert_eq!(with - total, 6 * 2 * 96);
        let routers = 2 * 8 * 3;
        assert_eq!(trainable, 6 * 2 * 96 + routers);
    }

    #[test]
    fn double_attach_is_structural_error() {
        let mut m = model();
        attach_lora(&mut m, 2, &mut substream(5, "lora", &[])).unwrap();
        let err = attach_lora(&mut m, 2, &mut substream(5, "lora", &[]));
        assert!(matches!(err, Err(Error::Structural(_))));
    }

    #[test]
    fn merge_after_training_preserves_logits() {
        let mut m = model();
        attach_lora(&mut m, 4, &mut substream(5, "lora", &[])).unwrap();
        let frozen_embedding = m.embedding.clone();
        let mut tr = Trainer::new(&TrainConfig::default());
        let tokens = array![[1, 2, 3, 4], [5, 6, 7, 8]];
        for _ in 0..5 {
            tr.step(&mut m, &tokens, &[0, 2]).unwrap();
        }
        assert_eq!(m.embedding, frozen_embedding);
        let adapted = forward(&m, &tokens).unwrap().logits;
        merge_lora(&mut m);
        let merged = forward(&m, &tokens).unwrap().logits;
        for (a, b) in adapted.iter().zip(merged.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
