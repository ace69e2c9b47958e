//! Parameter storage for the toy MoE network.
//!
//! A single [`MoeModel`] type backs both the server's global model (every
//! layer retains experts `0..E`) and client submodels (each layer retains a
//! subset). Router matrices keep one column per *retained* expert, in the
//! same order as `expert_ids`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Low-rank factors for one adapted matrix: effective weight is `base + a·b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn delta(&self) -> Array2<f64> {
        self.a.dot(&self.b)
    }

    pub fn param_count(&self) -> u64 {
        (self.a.len() + self.b.len()) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertLora {
    pub w1: LoraAdapter,
    pub w2: LoraAdapter,
}

/// Two-matrix ReLU FFN: `relu(x·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    /// `d × h`
    pub w1: Array2<f64>,
    pub b1: Option<Array1<f64>>,
    /// `h × d`
    pub w2: Array2<f64>,
    pub b2: Option<Array1<f64>>,
    pub lora: Option<ExpertLora>,
}

impl Expert {
    /// `w1` with any adapter folded in.
    pub fn effective_w1(&self) -> Array2<f64> {
        match &self.lora {
            Some(l) => &self.w1 + &l.w1.delta(),
            None => self.w1.clone(),
        }
    }

    pub fn effective_w2(&self) -> Array2<f64> {
        match &self.lora {
            Some(l) => &self.w2 + &l.w2.delta(),
            None => self.w2.clone(),
        }
    }

    fn zeros_like(&self) -> Expert {
        Expert {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: self.b1.as_ref().map(|b| Array1::zeros(b.len())),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: self.b2.as_ref().map(|b| Array1::zeros(b.len())),
            lora: self.lora.as_ref().map(|l| ExpertLora {
                w1: LoraAdapter {
                    a: Array2::zeros(l.w1.a.raw_dim()),
                    b: Array2::zeros(l.w1.b.raw_dim()),
                },
                w2: LoraAdapter {
                    a: Array2::zeros(l.w2.a.raw_dim()),
                    b: Array2::zeros(l.w2.b.raw_dim()),
                },
            }),
        }
    }
}

/// One MoE layer: router plus the retained expert pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    /// Global indices of the retained experts, strictly ascending.
    pub expert_ids: Vec<usize>,
    /// `d × expert_ids.len()`; column `k` scores expert `expert_ids[k]`.
    pub router: Array2<f64>,
    pub experts: Vec<Expert>,
}

impl MoeLayer {
    pub fn position(&self, expert: usize) -> Option<usize> {
        self.expert_ids.binary_search(&expert).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeModel {
    pub config: ModelConfig,
    /// `V × d`
    pub embedding: Array2<f64>,
    pub layers: Vec<MoeLayer>,
    /// `d × C`
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

/// Metadata handed to tensor visitors.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Small embedding init so learned structure dominates the random component.
pub const EMBED_INIT_STD: f64 = 0.1;

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl MoeModel {
    /// Random global model with `experts_per_layer` experts in every layer.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, h, v, c) = (
            config.embed_dim,
            config.hidden_dim,
            config.vocab_size,
            config.num_classes,
        );
        let embedding = normal_matrix(rng, v, d, EMBED_INIT_STD);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let e = config.experts_per_layer;
            let router = normal_matrix(rng, d, e, 1.0 / (d as f64).sqrt());
            let experts = (0..e)
                .map(|_| Expert {
                    w1: normal_matrix(rng, d, h, (2.0 / d as f64).sqrt()),
                    b1: config.expert_bias.then(|| Array1::zeros(h)),
                    w2: normal_matrix(rng, h, d, 0.5 / (h as f64).sqrt()),
                    b2: config.expert_bias.then(|| Array1::zeros(d)),
                    lora: None,
                })
                .collect();
            layers.push(MoeLayer {
                expert_ids: (0..e).collect(),
                router,
                experts,
            });
        }
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
            head_w: normal_matrix(rng, d, c, 1.0 / (d as f64).sqrt()),
            head_b: Array1::zeros(c),
        })
    }

    /// True when every layer retains the whole expert pool.
    pub fn is_full(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.expert_ids.len() == self.config.experts_per_layer)
    }

    pub fn has_lora(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.experts.iter().any(|e| e.lora.is_some()))
    }

    pub fn expert_count(&self) -> usize {
        self.layers.iter().map(|l| l.expert_ids.len()).sum()
    }

    /// Retention mask over the full `L × E` grid.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        self.layers
            .iter()
            .map(|l| {
                let mut row = vec![false; self.config.experts_per_layer];
                for &j in &l.expert_ids {
                    row[j] = true;
                }
                row
            })
            .collect()
    }

    pub fn check_structure(&self) -> Result<()> {
        if self.layers.len() != self.config.num_layers {
            return Err(Error::Structural(format!(
                "model has {} layers, config says {}",
                self.layers.len(),
                self.config.num_layers
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.expert_ids.is_empty() {
                return Err(Error::Structural(format!("layer {i} retains no experts")));
            }
            if layer.router.ncols() != layer.expert_ids.len()
                || layer.experts.len() != layer.expert_ids.len()
            {
                return Err(Error::Structural(format!(
                    "layer {i}: router/expert count disagrees with expert_ids"
                )));
            }
            if layer.expert_ids.windows(2).any(|w| w[0] >= w[1])
                || layer
                    .expert_ids
                    .iter()
                    .any(|&j| j >= self.config.experts_per_layer)
            {
                return Err(Error::Structural(format!(
                    "layer {i}: expert ids must be ascending and < {}",
                    self.config.experts_per_layer
                )));
            }
        }
        Ok(())
    }

    /// Copy of the dense parts plus the experts (and router columns) selected by `mask`.
    pub fn extract(&self, mask: &[Vec<bool>]) -> Result<MoeModel> {
        if mask.len() != self.layers.len() {
            return Err(Error::Structural(format!(
                "mask has {} layers, model has {}",
                mask.len(),
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, (layer, row)) in self.layers.iter().zip(mask).enumerate() {
            let mut ids = Vec::new();
            let mut positions = Vec::new();
            for (j, &keep) in row.iter().enumerate() {
                if keep {
                    let pos = layer.position(j).ok_or_else(|| {
                        Error::Structural(format!("expert ({i}, {j}) not present in source model"))
                    })?;
                    ids.push(j);
                    positions.push(pos);
                }
            }
            if ids.is_empty() {
                return Err(Error::Structural(format!("layer {i} retains no experts")));
            }
            let router = layer.router.select(ndarray::Axis(1), &positions).as_standard_layout().into_owned();
            let experts = positions.iter().map(|&p| layer.experts[p].clone()).collect();
            layers.push(MoeLayer {
                expert_ids: ids,
                router,
                experts,
            });
        }
        Ok(MoeModel {
            config: self.config.clone(),
            embedding: self.embedding.clone(),
            layers,
            head_w: self.head_w.clone(),
            head_b: self.head_b.clone(),
        })
    }

    /// Same structure, all values zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> MoeModel {
        MoeModel {
            config: self.config.clone(),
            embedding: Array2::zeros(self.embedding.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| MoeLayer {
                    expert_ids: l.expert_ids.clone(),
                    router: Array2::zeros(l.router.raw_dim()),
                    experts: l.experts.iter().map(Expert::zeros_like).collect(),
                })
                .collect(),
            head_w: Array2::zeros(self.head_w.raw_dim()),
            head_b: Array1::zeros(self.head_b.len()),
        }
    }

    /// Visit every tensor in a fixed canonical order.
    pub fn for_each_tensor(&self, f: &mut dyn FnMut(TensorInfo, &[f64])) {
        let lora = self.has_lora();
        let info = |name: String, shape: Vec<usize>, trainable: bool| TensorInfo {
            name,
            shape,
            trainable,
        };
        f(
            info("embedding".into(), self.embedding.shape().to_vec(), !lora),
            self.embedding.as_slice().expect("standard layout"),
        );
        for (i, layer) in self.layers.iter().enumerate() {
            f(
                info(format!("layers.{i}.router"), layer.router.shape().to_vec(), true),
                layer.router.as_slice().expect("standard layout"),
            );
            for (&j, e) in layer.expert_ids.iter().zip(&layer.experts) {
                let p = format!("layers.{i}.experts.{j}");
                f(info(format!("{p}.w1"), e.w1.shape().to_vec(), !lora), e.w1.as_slice().unwrap());
                if let Some(b) = &e.b1 {
                    f(info(format!("{p}.b1"), vec![b.len()], !lora), b.as_slice().unwrap());
                }
                f(info(format!("{p}.w2"), e.w2.shape().to_vec(), !lora), e.w2.as_slice().unwrap());
                if let Some(b) = &e.b2 {
                    f(info(format!("{p}.b2"), vec![b.len()], !lora), b.as_slice().unwrap());
                }
                if let Some(l) = &e.lora {
                    for (tag, ad) in [("w1", &l.w1), ("w2", &l.w2)] {
                        f(info(format!("{p}.{tag}.lora_a"), ad.a.shape().to_vec(), true), ad.a.as_slice().unwrap());
                        f(info(format!("{p}.{tag}.lora_b"), ad.b.shape().to_vec(), true), ad.b.as_slice().unwrap());
                    }
                }
            }
        }
        f(info("head.weight".into(), self.head_w.shape().to_vec(), !lora), self.head_w.as_slice().unwrap());
        f(info("head.bias".into(), vec![self.head_b.len()], !lora), self.head_b.as_slice().unwrap());
    }

    /// Mutable counterpart of [`for_each_tensor`](Self::for_each_tensor), same order.
    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(TensorInfo, &mut [f64])) {
        let lora = self.has_lora();
        let info = |name: String, shape: Vec<usize>, trainable: bool| TensorInfo {
            name,
            shape,
            trainable,
        };
        let shape = self.embedding.shape().to_vec();
        f(info("embedding".into(), shape, !lora), self.embedding.as_slice_mut().expect("standard layout"));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let shape = layer.router.shape().to_vec();
            f(info(format!("layers.{i}.router"), shape, true), layer.router.as_slice_mut().unwrap());
            for (&j, e) in layer.expert_ids.iter().zip(layer.experts.iter_mut()) {
                let p = format!("layers.{i}.experts.{j}");
                let s = e.w1.shape().to_vec();
                f(info(format!("{p}.w1"), s, !lora), e.w1.as_slice_mut().unwrap());
                if let Some(b) = &mut e.b1 {
                    f(info(format!("{p}.b1"), vec![b.len()], !lora), b.as_slice_mut().unwrap());
                }
                let s = e.w2.shape().to_vec();
                f(info(format!("{p}.w2"), s, !lora), e.w2.as_slice_mut().unwrap());
                if let Some(b) = &mut e.b2 {
                    f(info(format!("{p}.b2"), vec![b.len()], !lora), b.as_slice_mut().unwrap());
                }
                if let Some(l) = &mut e.lora {
                    for (tag, ad) in [("w1", &mut l.w1), ("w2", &mut l.w2)] {
                        let s = ad.a.shape().to_vec();
                        f(info(format!("{p}.{tag}.lora_a"), s, true), ad.a.as_slice_mut().unwrap());
                        let s = ad.b.shape().to_vec();
                        f(info(format!("{p}.{tag}.lora_b"), s, true), ad.b.as_slice_mut().unwrap());
                    }
                }
            }
        }
        let s = self.head_w.shape().to_vec();
        f(info("head.weight".into(), s, !lora), self.head_w.as_slice_mut().unwrap());
        let n = self.head_b.len();
        f(info("head.bias".into(), vec![n], !lora), self.head_b.as_slice_mut().unwrap());
    }

    /// `(total, trainable)` parameter counts.
    pub fn param_counts(&self) -> (u64, u64) {
        let mut total = 0u64;
        let mut trainable = 0u64;
        self.for_each_tensor(&mut |info, data| {
            total += data.len() as u64;
            if info.trainable {
                trainable += data.len() as u64;
            }
        });
        (total, trainable)
    }

    /// All parameters flattened in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_tensor(&mut |_, d| out.extend_from_slice(d));
        out
    }

    /// True when every value is finite.
    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(&mut |_, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }
}
