//! Structured-text checkpoints: JSON with a format tag, the model config,
//! the retained expert ids per layer and every tensor as `name`, `shape`,
//! row-major `data`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{Expert, ExpertLora, LoraAdapter, MoeLayer, MoeModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "fedmoe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub expert_ids: Vec<Vec<usize>>,
    pub lora_rank: Option<usize>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &MoeModel) -> Self {
        let mut tensors = Vec::new();
        model.for_each_tensor(&mut |info, data| {
            tensors.push(NamedTensor {
                name: info.name,
                shape: info.shape,
                data: data.to_vec(),
            })
        });
        let lora_rank = model
            .layers
            .iter()
            .flat_map(|l| l.experts.iter())
            .find_map(|e| e.lora.as_ref().map(|l| l.w1.rank()));
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            expert_ids: model.layers.iter().map(|l| l.expert_ids.clone()).collect(),
            lora_rank,
            tensors,
        }
    }

    /// Rebuild the model: allocate the declared structure, then fill tensors
    /// by name in canonical order, checking every shape.
    pub fn into_model(self) -> Result<MoeModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let cfg = self.config.clone();
        cfg.validate()?;
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
        let z2 = |r, c| ndarray::Array2::zeros((r, c));
        let adapter = |r, c, k| LoraAdapter { a: z2(r, k), b: z2(k, c) };
        let layers = self
            .expert_ids
            .iter()
            .map(|ids| MoeLayer {
                expert_ids: ids.clone(),
                router: z2(d, ids.len()),
                experts: ids
                    .iter()
                    .map(|_| Expert {
                        w1: z2(d, h),
                        b1: cfg.expert_bias.then(|| ndarray::Array1::zeros(h)),
                        w2: z2(h, d),
                        b2: cfg.expert_bias.then(|| ndarray::Array1::zeros(d)),
                        lora: self.lora_rank.map(|k| ExpertLora {
                            w1: adapter(d, h, k),
                            w2: adapter(h, d, k),
                        }),
                    })
                    .collect(),
            })
            .collect();
        let mut model = MoeModel {
            config: cfg.clone(),
            embedding: z2(cfg.vocab_size, d),
            layers,
            head_w: z2(d, cfg.num_classes),
            head_b: ndarray::Array1::zeros(cfg.num_classes),
        };
        model.check_structure()?;
        let mut incoming = self.tensors.into_iter();
        let mut failure: Option<Error> = None;
        model.for_each_tensor_mut(&mut |info, dst| {
            if failure.is_some() {
                return;
            }
            match incoming.next() {
                Some(t) if t.name == info.name && t.shape == info.shape && t.data.len() == dst.len() => {
                    dst.copy_from_slice(&t.data)
                }
                Some(t) => {
                    failure = Some(Error::Structural(format!(
                        "checkpoint tensor {} {:?} does not match expected {} {:?}",
                        t.name, t.shape, info.name, info.shape
                    )))
                }
                None => failure = Some(Error::Structural(format!("checkpoint missing {}", info.name))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = incoming.next() {
            return Err(Error::Structural(format!("unexpected tensor {}", extra.name)));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &MoeModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_model(model))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MoeModel> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.into_model()
}
