use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy MoE network. Every submodel derived from a global model
/// shares all of these and differs only in which experts it retains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub bytes_per_param: u64,
    /// Whether expert FFNs carry bias vectors.
    pub expert_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            experts_per_layer: 8,
            embed_dim: 16,
            hidden_dim: 32,
            vocab_size: 64,
            num_classes: 12,
            bytes_per_param: 4,
            expert_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("experts_per_layer", self.experts_per_layer),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.bytes_per_param == 0 {
            return Err(Error::Config("model.bytes_per_param must be >= 1".into()));
        }
        Ok(())
    }

    /// Embedding, output head and head bias.
    pub fn dense_param_count(&self) -> u64 {
        (self.vocab_size * self.embed_dim + self.embed_dim * self.num_classes + self.num_classes)
            as u64
    }

    /// One expert FFN block (both matrices plus optional biases).
    pub fn expert_param_count(&self) -> u64 {
        let d = self.embed_dim as u64;
        let h = self.hidden_dim as u64;
        let bias = if self.expert_bias { h + d } else { 0 };
        2 * d * h + bias
    }

    /// One router column.
    pub fn router_column_count(&self) -> u64 {
        self.embed_dim as u64
    }

    pub fn full_param_count(&self) -> u64 {
        self.dense_param_count()
            + (self.num_layers * self.experts_per_layer) as u64
                * (self.expert_param_count() + self.router_column_count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Local optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub label_smoothing: f64,
    /// Weight of the load-balance term in the local objective.
    pub lb_weight: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            label_smoothing: 0.1,
            lb_weight: 0.01,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("train.label_smoothing must lie in [0, 1)".into()));
        }
        if !(self.lb_weight >= 0.0) {
            return Err(Error::Config("train.lb_weight must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("train adam betas must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}
