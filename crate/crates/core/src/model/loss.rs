//! Local objective: label-smoothed cross-entropy plus a weighted
//! switch-style load-balance term averaged over layers.

use ndarray::{Array2, ArrayView2};

use super::config::TrainConfig;
use super::forward::{softmax_rows, ForwardOutput};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub lb: f64,
}

/// Label-smoothed cross-entropy averaged over the batch, with its gradient
/// w.r.t. the logits.
pub fn smoothed_cross_entropy(
    logits: ArrayView2<f64>,
    targets: &[usize],
    smoothing: f64,
) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if targets.len() != b {
        return Err(Error::Input(format!(
            "{} targets for {} logit rows",
            targets.len(),
            b
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
        return Err(Error::Input(format!("target class {bad} out of range ({c} classes)")));
    }
    let probs = softmax_rows(&logits.to_owned());
    let off = smoothing / c as f64;
    let on = 1.0 - smoothing + off;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (row, &y) in targets.iter().enumerate() {
        let max = logits.row(row).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + logits.row(row).mapv(|v| (v - max).exp()).sum().ln();
        for k in 0..c {
            let q = if k == y { on } else { off };
            loss -= q * (logits[[row, k]] - lse);
            grad[[row, k]] -= q;
        }
    }
    grad /= b as f64;
    Ok((loss / b as f64, grad))
}

/// Switch-style balance loss for one layer: `E′ · Σ_k f_k · P_k` where `f_k` is
/// the fraction of tokens dispatched to expert `k` and `P_k` its mean router
/// probability. Returns the loss and `∂loss/∂probs`.
pub fn layer_load_balance(choice: &[usize], probs: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let (n, e) = probs.dim();
    let mut frac = vec![0.0; e];
    for &k in choice {
        frac[k] += 1.0;
    }
    for f in &mut frac {
        *f /= n as f64;
    }
    let mean_prob = probs.mean_axis(ndarray::Axis(0)).expect("n > 0");
    let loss = e as f64 * frac.iter().zip(mean_prob.iter()).map(|(f, p)| f * p).sum::<f64>();
    let grad = Array2::from_shape_fn((n, e), |(_, k)| e as f64 * frac[k] / n as f64);
    (loss, grad)
}

/// Gradients of the total loss w.r.t. logits and per-layer router probabilities.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub logits: Array2<f64>,
    pub router_probs: Vec<Array2<f64>>,
}

/// Full objective for one forward pass.
pub fn loss(out: &ForwardOutput, targets: &[usize], cfg: &TrainConfig) -> Result<LossBreakdown> {
    loss_with_grads(out, targets, cfg).map(|(l, _)| l)
}

pub fn loss_with_grads(
    out: &ForwardOutput,
    targets: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, LossGrads)> {
    let (ce, dlogits) = smoothed_cross_entropy(out.logits.view(), targets, cfg.label_smoothing)?;
    let layers = out.router_probs.len().max(1) as f64;
    let mut lb = 0.0;
    let mut dprobs = Vec::with_capacity(out.router_probs.len());
    for (probs, cache) in out.router_probs.iter().zip(&out.cache.layers) {
        let (l, g) = layer_load_balance(&cache.choice, probs.view());
        lb += l;
        dprobs.push(g * (cfg.lb_weight / layers));
    }
    lb /= layers;
    let total = ce + cfg.lb_weight * lb;
    Ok((
        LossBreakdown { total, ce, lb },
        LossGrads {
            logits: dlogits,
            router_probs: dprobs,
        },
    ))
}
