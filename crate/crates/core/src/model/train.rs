//! Manual backward pass and optimisers.
//!
//! The top-1 argmax is piecewise constant, so the router learns through the
//! gate value (the chosen expert's softmax probability) that scales the
//! expert output, plus the load-balance term's dependence on mean
//! probabilities.

use ndarray::{Array1, Array2, Axis};

use super::config::{OptimizerKind, TrainConfig};
use super::forward::{forward, ForwardOutput, TokenBatch};
use super::loss::{loss_with_grads, LossBreakdown, LossGrads};
use super::params::MoeModel;
use crate::error::{Error, Result};

/// Gradient of the objective for every tensor of `model`, as a same-shaped model.
pub fn backward(model: &MoeModel, out: &ForwardOutput, lg: &LossGrads) -> MoeModel {
    let mut g = model.zeros_like();
    let cache = &out.cache;
    let t = cache.seq_len;
    let b = out.logits.nrows();

    g.head_w = cache.pooled.t().dot(&lg.logits);
    g.head_b = lg.logits.sum_axis(Axis(0));
    let dpooled = lg.logits.dot(&model.head_w.t());

    // Mean-pool backward.
    let n = b * t;
    let mut dx = Array2::zeros((n, model.config.embed_dim));
    for seq in 0..b {
        let row = &dpooled.row(seq) / t as f64;
        for pos in 0..t {
            dx.row_mut(seq * t + pos).assign(&row);
        }
    }

    for (i, layer) in model.layers.iter().enumerate().rev() {
        let lc = &cache.layers[i];
        let probs = &out.router_probs[i];
        let e = layer.expert_ids.len();
        let gl = &mut g.layers[i];

        // dx currently holds ∂L/∂(layer output); residual passes it through.
        let mut dprobs = lg.router_probs[i].clone();
        let mut dx_in = dx.clone();
        let mut dw1_eff: Vec<Array2<f64>> = lc.w1_eff.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
        let mut dw2_eff: Vec<Array2<f64>> = lc.w2_eff.iter().map(|w| Array2::zeros(w.raw_dim())).collect();

        for k in 0..e {
            let rows: Vec<usize> = (0..n).filter(|&r| lc.choice[r] == k).collect();
            if rows.is_empty() {
                continue;
            }
            let dout = dx.select(Axis(0), &rows);
            let yk = lc.expert_out.select(Axis(0), &rows);
            let gk = Array1::from_iter(rows.iter().map(|&r| lc.gate[r]));
            for (local, &r) in rows.iter().enumerate() {
                dprobs[[r, k]] += dout.row(local).dot(&yk.row(local));
            }
            let dy = &dout * &gk.view().insert_axis(Axis(1));
            let hk = lc.pre_act.select(Axis(0), &rows);
            let ak = hk.mapv(|v| v.max(0.0));
            dw2_eff[k] = ak.t().dot(&dy);
            if let Some(b2) = &mut gl.experts[k].b2 {
                *b2 = dy.sum_axis(Axis(0));
            }
            let mut dh = dy.dot(&lc.w2_eff[k].t());
            dh.zip_mut_with(&hk, |d, &h| {
                if h <= 0.0 {
                    *d = 0.0;
                }
            });
            let xk = lc.input.select(Axis(0), &rows);
            dw1_eff[k] = xk.t().dot(&dh);
            if let Some(b1) = &mut gl.experts[k].b1 {
                *b1 = dh.sum_axis(Axis(0));
            }
            let dxk = dh.dot(&lc.w1_eff[k].t());
            for (local, &r) in rows.iter().enumerate() {
                dx_in.row_mut(r).scaled_add(1.0, &dxk.row(local));
            }
        }

        // Softmax backward: dz = p ⊙ (dp − Σ p·dp).
        let mut dz = dprobs;
        for (mut dzr, pr) in dz.rows_mut().into_iter().zip(probs.rows()) {
            let inner = dzr.dot(&pr);
            dzr.zip_mut_with(&pr, |d, &p| *d = p * (*d - inner));
        }
        gl.router = lc.input.t().dot(&dz);
        dx_in += &dz.dot(&layer.router.t());

        for (k, expert) in layer.experts.iter().enumerate() {
            let ge = &mut gl.experts[k];
            if let (Some(l), Some(gll)) = (&expert.lora, &mut ge.lora) {
                gll.w1.a = dw1_eff[k].dot(&l.w1.b.t());
                gll.w1.b = l.w1.a.t().dot(&dw1_eff[k]);
                gll.w2.a = dw2_eff[k].dot(&l.w2.b.t());
                gll.w2.b = l.w2.a.t().dot(&dw2_eff[k]);
            }
            ge.w1 = std::mem::take(&mut dw1_eff[k]);
            ge.w2 = std::mem::take(&mut dw2_eff[k]);
        }
        dx = dx_in;
    }

    for (r, &tok) in cache.tokens.iter().enumerate() {
        g.embedding.row_mut(tok).scaled_add(1.0, &dx.row(r));
    }
    g
}

/// Forward, loss and gradient in one call.
pub fn loss_and_grad(
    model: &MoeModel,
    tokens: &TokenBatch,
    targets: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, MoeModel)> {
    let out = forward(model, tokens)?;
    let (l, lg) = loss_with_grads(&out, targets, cfg)?;
    if !l.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss (ce = {}, lb = {})",
            l.ce, l.lb
        )));
    }
    Ok((l, backward(model, &out, &lg)))
}

fn tensors(model: &MoeModel) -> Vec<Vec<f64>> {
    let mut v = Vec::new();
    model.for_each_tensor(&mut |_, d| v.push(d.to_vec()));
    v
}

/// Stateful optimiser bound to one model structure for one training session.
///
/// Only tensors flagged trainable are updated. An optional proximal anchor
/// adds `μ·(w − w_anchor)` to each trainable gradient.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    proximal: Option<(f64, Vec<Vec<f64>>)>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            proximal: None,
        }
    }

    /// Anchor the proximal term at the current values of `anchor`.
    pub fn with_proximal(mut self, mu: f64, anchor: &MoeModel) -> Self {
        self.proximal = Some((mu, tensors(anchor)));
        self
    }

    /// Apply one update given precomputed gradients.
    pub fn apply(&mut self, model: &mut MoeModel, grads: &MoeModel) {
        let mut grads = tensors(grads);
        if let Some((mu, anchor)) = &self.proximal {
            let current = tensors(model);
            for ((g, w), a) in grads.iter_mut().zip(&current).zip(anchor) {
                for ((gi, wi), ai) in g.iter_mut().zip(w).zip(a) {
                    *gi += mu * (wi - ai);
                }
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let cfg = &self.cfg;
        let lr = cfg.learning_rate;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.for_each_tensor_mut(&mut |info, w| {
            let g = &grads[idx];
            if info.trainable {
                match cfg.optimizer {
                    OptimizerKind::Sgd => {
                        for (wi, gi) in w.iter_mut().zip(g) {
                            *wi -= lr * gi;
                        }
                    }
                    OptimizerKind::Adam => {
                        let (m, v) = (&mut ms[idx], &mut vs[idx]);
                        for j in 0..w.len() {
                            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                            let mh = m[j] / bc1;
                            let vh = v[j] / bc2;
                            w[j] -= lr * mh / (vh.sqrt() + cfg.eps);
                        }
                    }
                }
            }
            idx += 1;
        });
    }

    /// One optimisation step on a batch; returns the pre-step loss.
    pub fn step(
        &mut self,
        model: &mut MoeModel,
        tokens: &TokenBatch,
        targets: &[usize],
    ) -> Result<LossBreakdown> {
        let (l, g) = loss_and_grad(model, tokens, targets, &self.cfg)?;
        self.apply(model, &g);
        if !model.is_finite() {
            return Err(Error::Numerical("parameters became non-finite after update".into()));
        }
        Ok(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::rng::substream;
    use ndarray::array;

    fn tiny(e: usize, layers: usize) -> MoeModel {
        let cfg = ModelConfig {
            num_layers: layers,
            experts_per_layer: e,
            embed_dim: 4,
            hidden_dim: 5,
            vocab_size: 8,
            num_classes: 3,
            bytes_per_param: 4,
            expert_bias: true,
        };
        MoeModel::init(&cfg, &mut substream(11, "init", &[])).unwrap()
    }

    fn sgd(lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let mut m = tiny(3, 2);
        let before = m.clone();
        for opt in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = TrainConfig {
                learning_rate: 0.0,
                optimizer: opt,
                ..TrainConfig::default()
            };
            let mut tr = Trainer::new(&cfg);
            tr.step(&mut m, &array![[1, 2, 3], [4, 5, 6]], &[0, 2]).unwrap();
            assert_eq!(m, before);
        }
    }

    #[test]
    fn sgd_step_equals_minus_lr_times_fd_gradient() {
        let mut m = tiny(1, 1);
        let tokens = array![[1, 2, 3, 1], [4, 5, 6, 7]];
        let targets = [0, 2];
        let cfg = sgd(0.05);
        let before = m.flatten();
        // Central differences on the pre-step loss.
        let h = 1e-5;
        let mut fd = Vec::with_capacity(before.len());
        for idx in 0..before.len() {
            let eval = |delta: f64| {
                let mut p = m.clone();
                let mut k = 0;
                p.for_each_tensor_mut(&mut |_, d| {
                    for v in d.iter_mut() {
                        if k == idx {
                            *v += delta;
                        }
                        k += 1;
                    }
                });
                let out = forward(&p, &tokens).unwrap();
                super::super::loss::loss(&out, &targets, &cfg).unwrap().total
            };
            fd.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        Trainer::new(&cfg).step(&mut m, &tokens, &targets).unwrap();
        let after = m.flatten();
        for ((b, a), g) in before.iter().zip(&after).zip(&fd) {
            let delta = a - b;
            let expected = -cfg.learning_rate * g;
            let tol = 1e-4 * expected.abs().max(1e-7);
            assert!((delta - expected).abs() <= tol, "delta {delta} vs {expected}");
        }
    }

    #[test]
    fn identical_runs_follow_identical_trajectories() {
        let run = || {
            let mut m = tiny(3, 2);
            let mut tr = Trainer::new(&TrainConfig::default());
            let mut losses = Vec::new();
            for s in 0..5 {
                let tokens = array![[s % 8, 1, 2], [3, (s + 4) % 8, 5]];
                losses.push(tr.step(&mut m, &tokens, &[1, 0]).unwrap().total);
            }
            (m, losses)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn proximal_term_adds_mu_times_displacement() {
        // Scalar view: w = 3, anchor = 1, μ = 2 → extra gradient 4.
        let mut m = tiny(1, 1);
        let anchor = m.clone();
        m.head_b[0] = 3.0;
        let mut a = anchor.clone();
        a.head_b[0] = 1.0;
        let zero = m.zeros_like();
        let mut tr = Trainer::new(&sgd(1.0)).with_proximal(2.0, &a);
        let before = m.head_b[0];
        tr.apply(&mut m, &zero);
        assert_eq!(before - m.head_b[0], 2.0 * (3.0 - 1.0));
    }

    #[test]
    fn nan_parameters_surface_numerical_error() {
        let mut m = tiny(2, 1);
        m.head_b[0] = f64::NAN;
        let err = Trainer::new(&sgd(0.1)).step(&mut m, &array![[1, 2]], &[0]);
        assert!(matches!(err, Err(Error::Numerical(_))));
    }
}
