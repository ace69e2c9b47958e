//! Forward pass: embedding → L × (top-1 routed expert FFN with residual) →
//! mean-pool over the sequence → linear classification head.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::params::MoeModel;
use crate::error::{Error, Result};

/// Token ids, one row per sequence.
pub type TokenBatch = Array2<usize>;

/// Everything the loss and the backward pass need from a forward run.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B × C`
    pub logits: Array2<f64>,
    /// `[layer][token]` global expert index chosen for each of the `B·T` tokens.
    pub routing_trace: Vec<Vec<usize>>,
    /// `[layer]` → `B·T × E′` softmax over the retained experts (columns follow `expert_ids`).
    pub router_probs: Vec<Array2<f64>>,
    pub(crate) cache: ForwardCache,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub input: Array2<f64>,
    /// Position (within retained experts) chosen per token.
    pub choice: Vec<usize>,
    pub gate: Array1<f64>,
    pub pre_act: Array2<f64>,
    pub expert_out: Array2<f64>,
    pub w1_eff: Vec<Array2<f64>>,
    pub w2_eff: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub tokens: Vec<usize>,
    pub seq_len: usize,
    pub layers: Vec<LayerCache>,
    pub pooled: Array2<f64>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// Run the network on a `B × T` batch of token ids.
pub fn forward(model: &MoeModel, tokens: &TokenBatch) -> Result<ForwardOutput> {
    model.check_structure()?;
    let (b, t) = tokens.dim();
    if b == 0 || t == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let vocab = model.config.vocab_size;
    let flat: Vec<usize> = tokens.iter().copied().collect();
    if let Some(&bad) = flat.iter().find(|&&tok| tok >= vocab) {
        return Err(Error::Input(format!("token id {bad} out of range (vocab {vocab})")));
    }

    let mut x = model.embedding.select(Axis(0), &flat);
    let n = flat.len();
    let mut routing_trace = Vec::with_capacity(model.layers.len());
    let mut router_probs = Vec::with_capacity(model.layers.len());
    let mut layer_caches = Vec::with_capacity(model.layers.len());

    for layer in &model.layers {
        let z = x.dot(&layer.router);
        let probs = softmax_rows(&z);
        let choice: Vec<usize> = z.rows().into_iter().map(argmax_lowest).collect();
        let gate = Array1::from_iter(choice.iter().enumerate().map(|(row, &k)| probs[[row, k]]));

        let w1_eff: Vec<_> = layer.experts.iter().map(|e| e.effective_w1()).collect();
        let w2_eff: Vec<_> = layer.experts.iter().map(|e| e.effective_w2()).collect();
        let h = model.config.hidden_dim;
        let mut pre_act = Array2::zeros((n, h));
        let mut expert_out = Array2::zeros((n, model.config.embed_dim));
        for (k, expert) in layer.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&r| choice[r] == k).collect();
            if rows.is_empty() {
                continue;
            }
            let xk = x.select(Axis(0), &rows);
            let mut hk = xk.dot(&w1_eff[k]);
            if let Some(b1) = &expert.b1 {
                hk += b1;
            }
            let ak = hk.mapv(|v| v.max(0.0));
            let mut yk = ak.dot(&w2_eff[k]);
            if let Some(b2) = &expert.b2 {
                yk += b2;
            }
            for (i, &r) in rows.iter().enumerate() {
                pre_act.row_mut(r).assign(&hk.row(i));
                expert_out.row_mut(r).assign(&yk.row(i));
            }
        }
        let mut next = x.clone();
        for r in 0..n {
            let g = gate[r];
            next.row_mut(r).scaled_add(g, &expert_out.row(r));
        }

        routing_trace.push(choice.iter().map(|&k| layer.expert_ids[k]).collect());
        router_probs.push(probs);
        layer_caches.push(LayerCache {
            input: x,
            choice,
            gate,
            pre_act,
            expert_out,
            w1_eff,
            w2_eff,
        });
        x = next;
    }

    let mut pooled = Array2::zeros((b, model.config.embed_dim));
    for seq in 0..b {
        let mean = x
            .slice(s![seq * t..(seq + 1) * t, ..])
            .mean_axis(Axis(0))
            .expect("t > 0");
        pooled.row_mut(seq).assign(&mean);
    }
    let logits = pooled.dot(&model.head_w) + &model.head_b;

    Ok(ForwardOutput {
        logits,
        routing_trace,
        router_probs,
        cache: ForwardCache {
            tokens: flat,
            seq_len: t,
            layers: layer_caches,
            pooled,
        },
    })
}
