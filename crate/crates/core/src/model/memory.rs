//! Byte-exact parameter memory model.
//!
//! Memory is parameter bytes times an optimiser multiplier; activations are
//! not counted.

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, OptimizerKind};
use super::params::MoeModel;

/// Retention mask over the full `L × E` expert grid.
pub type ExpertMask = Vec<Vec<bool>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryMode {
    Eval,
    Train(OptimizerKind),
}

impl MemoryMode {
    /// Eval keeps parameters only; SGD adds gradients; Adam adds gradients and two moments.
    pub fn multiplier(self) -> u64 {
        match self {
            MemoryMode::Eval => 1,
            MemoryMode::Train(OptimizerKind::Sgd) => 2,
            MemoryMode::Train(OptimizerKind::Adam) => 4,
        }
    }
}

pub fn full_mask(cfg: &ModelConfig) -> ExpertMask {
    vec![vec![true; cfg.experts_per_layer]; cfg.num_layers]
}

pub fn retained_experts(mask: &[Vec<bool>]) -> u64 {
    mask.iter().flatten().filter(|&&x| x).count() as u64
}

/// Dense parameters plus each retained expert and its router column.
pub fn mask_param_count(cfg: &ModelConfig, mask: &[Vec<bool>]) -> u64 {
    cfg.dense_param_count()
        + retained_experts(mask) * (cfg.expert_param_count() + cfg.router_column_count())
}

pub fn mem_bytes(cfg: &ModelConfig, mask: &[Vec<bool>], mode: MemoryMode) -> u64 {
    cfg.bytes_per_param * mask_param_count(cfg, mask) * mode.multiplier()
}

/// Bytes for an instantiated model. With adapters attached, frozen tensors
/// count once and only trainable tensors carry optimiser state.
pub fn model_mem_bytes(model: &MoeModel, mode: MemoryMode) -> u64 {
    let (total, trainable) = model.param_counts();
    let frozen = total - trainable;
    model.config.bytes_per_param * (frozen + trainable * mode.multiplier())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(bias: bool) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            experts_per_layer: 1,
            embed_dim: 8,
            hidden_dim: 16,
            vocab_size: 10,
            num_classes: 3,
            bytes_per_param: 4,
            expert_bias: bias,
        }
    }

    #[test]
    fn empty_mask_is_dense_only() {
        let c = cfg(true);
        let mask = vec![vec![false; 4]; 2];
        assert_eq!(mem_bytes(&c, &mask, MemoryMode::Eval), 4 * c.dense_param_count());
    }

    #[test]
    fn doubling_experts_doubles_expert_term() {
        let c = ModelConfig { experts_per_layer: 4, num_layers: 2, ..cfg(true) };
        let empty = mem_bytes(&c, &[vec![false; 4], vec![false; 4]], MemoryMode::Eval);
        let one = mem_bytes(&c, &vec![vec![true, false, false, false]; 2], MemoryMode::Eval);
        let two = mem_bytes(&c, &vec![vec![true, true, false, false]; 2], MemoryMode::Eval);
        assert_eq!(two - empty, 2 * (one - empty));
    }

    #[test]
    fn single_bias_free_expert_block_is_1024_bytes() {
        let c = cfg(false);
        assert_eq!(c.bytes_per_param * c.expert_param_count(), 1024);
    }

    #[test]
    fn adam_training_quadruples() {
        let c = cfg(true);
        let m = full_mask(&c);
        assert_eq!(
            mem_bytes(&c, &m, MemoryMode::Train(OptimizerKind::Adam)),
            4 * mem_bytes(&c, &m, MemoryMode::Eval)
        );
    }
}
