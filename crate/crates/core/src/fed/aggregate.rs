//! Modular aggregation of heterogeneous submodels into the global model.
//!
//! Dense tensors (embedding, head) are FedAvg-ed over all participants.
//! Each expert `(i, j)` and its router column follow their users only:
//! untouched when nobody retained it, copied from a sole user, and
//! volume-weighted averaged across several users.

use ndarray::{Array1, Array2, Zip};

use crate::error::{Error, Result};
use crate::model::{Expert, MoeModel};

/// One participant's trained submodel and data volume.
#[derive(Debug, Clone, Copy)]
pub struct EdgeUpdate<'a> {
    pub client_id: usize,
    pub model: &'a MoeModel,
    pub volume: f64,
}

fn weighted_mean2(parts: &[(f64, &Array2<f64>)]) -> Array2<f64> {
    if let [(_, only)] = parts {
        return (*only).clone();
    }
    let total: f64 = parts.iter().map(|(w, _)| w).sum();
    let mut acc = Array2::zeros(parts[0].1.raw_dim());
    for (w, a) in parts {
        acc.scaled_add(w / total, a);
    }
    acc
}

fn weighted_mean1(parts: &[(f64, &Array1<f64>)]) -> Array1<f64> {
    if let [(_, only)] = parts {
        return (*only).clone();
    }
    let total: f64 = parts.iter().map(|(w, _)| w).sum();
    let mut acc = Array1::zeros(parts[0].1.len());
    for (w, a) in parts {
        acc.scaled_add(w / total, a);
    }
    acc
}

fn check(global: &MoeModel, u: &EdgeUpdate) -> Result<()> {
    let m = u.model;
    if m.config != global.config {
        return Err(Error::Structural(format!(
            "client {}: submodel config differs from global",
            u.client_id
        )));
    }
    m.check_structure()?;
    if m.has_lora() {
        return Err(Error::Structural(format!(
            "client {}: merge adapters before aggregation",
            u.client_id
        )));
    }
    if !(u.volume > 0.0) {
        return Err(Error::Input(format!("client {}: data volume must be > 0", u.client_id)));
    }
    Ok(())
}

/// Fold participant submodels into `global`. Participants are processed in
/// ascending `client_id`, so the result does not depend on arrival order.
pub fn modular_aggregate(global: &mut MoeModel, updates: &[EdgeUpdate]) -> Result<()> {
    if !global.is_full() {
        return Err(Error::Structural("aggregation target must hold every expert".into()));
    }
    if updates.is_empty() {
        return Ok(());
    }
    for u in updates {
        check(global, u)?;
    }
    let mut ups: Vec<&EdgeUpdate> = updates.iter().collect();
    ups.sort_by_key(|u| u.client_id);

    let dense = |f: &dyn Fn(&MoeModel) -> &Array2<f64>| -> Array2<f64> {
        let parts: Vec<_> = ups.iter().map(|u| (u.volume, f(u.model))).collect();
        weighted_mean2(&parts)
    };
    global.embedding = dense(&|m| &m.embedding);
    global.head_w = dense(&|m| &m.head_w);
    let parts: Vec<_> = ups.iter().map(|u| (u.volume, &u.model.head_b)).collect();
    global.head_b = weighted_mean1(&parts);

    for i in 0..global.layers.len() {
        let e = global.config.experts_per_layer;
        for j in 0..e {
            let users: Vec<(f64, &Expert, ndarray::ArrayView1<f64>)> = ups
                .iter()
                .filter_map(|u| {
                    let layer = &u.model.layers[i];
                    layer
                        .position(j)
                        .map(|p| (u.volume, &layer.experts[p], layer.router.column(p)))
                })
                .collect();
            if users.is_empty() {
                continue;
            }
            let target = &mut global.layers[i];
            let w1: Vec<_> = users.iter().map(|(w, x, _)| (*w, &x.w1)).collect();
            let w2: Vec<_> = users.iter().map(|(w, x, _)| (*w, &x.w2)).collect();
            let expert = &mut target.experts[j];
            expert.w1 = weighted_mean2(&w1);
            expert.w2 = weighted_mean2(&w2);
            if expert.b1.is_some() {
                let b1: Vec<_> = users.iter().map(|(w, x, _)| (*w, x.b1.as_ref().unwrap())).collect();
                let b2: Vec<_> = users.iter().map(|(w, x, _)| (*w, x.b2.as_ref().unwrap())).collect();
                expert.b1 = Some(weighted_mean1(&b1));
                expert.b2 = Some(weighted_mean1(&b2));
            }
            let cols: Vec<(f64, Array1<f64>)> = users.iter().map(|(w, _, c)| (*w, c.to_owned())).collect();
            let cols_ref: Vec<_> = cols.iter().map(|(w, c)| (*w, c)).collect();
            let merged = weighted_mean1(&cols_ref);
            Zip::from(target.router.column_mut(j)).and(&merged).for_each(|d, &s| *d = s);
        }
    }
    Ok(())
}
