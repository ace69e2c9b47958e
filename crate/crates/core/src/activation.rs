//! Expert activation profiles: measurement, same-task prediction and
//! cosine similarity.
//!
//! Profiles always span the full `L × E` global grid; experts a submodel
//! does not retain simply have zero probability.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{to_batch, Sample};
use crate::error::{Error, Result};
use crate::model::{forward, MoeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub client_id: usize,
    /// `p[i][j]`: fraction of tokens routed to expert `j` at layer `i`.
    pub probs: Array2<f64>,
    /// Raw activation counts when the profile was measured (absent for predictions).
    pub counts: Option<Array2<u64>>,
    pub token_count: u64,
}

impl ActivationProfile {
    pub fn from_counts(client_id: usize, counts: Array2<u64>, token_count: u64) -> Result<Self> {
        if token_count == 0 {
            return Err(Error::Input("profile needs at least one token".into()));
        }
        let probs = counts.mapv(|c| c as f64 / token_count as f64);
        Ok(Self {
            client_id,
            probs,
            counts: Some(counts),
            token_count,
        })
    }

    /// Maximum-entropy profile `p = 1/E`.
    pub fn uniform(client_id: usize, layers: usize, experts: usize) -> Self {
        Self {
            client_id,
            probs: Array2::from_elem((layers, experts), 1.0 / experts as f64),
            counts: None,
            token_count: 0,
        }
    }

    pub fn layers(&self) -> usize {
        self.probs.nrows()
    }

    pub fn experts(&self) -> usize {
        self.probs.ncols()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.probs.rows().into_iter().map(|r| r.sum()).collect()
    }
}

const MEASURE_CHUNK: usize = 64;

/// Route every token of `shard` through `model` and histogram the choices.
pub fn measure_profile(model: &MoeModel, shard: &[Sample], client_id: usize) -> Result<ActivationProfile> {
    if shard.is_empty() {
        return Err(Error::Input(format!("client {client_id}: empty validation shard")));
    }
    let cfg = &model.config;
    let mut counts = Array2::<u64>::zeros((cfg.num_layers, cfg.experts_per_layer));
    let mut tokens = 0u64;
    let idx: Vec<usize> = (0..shard.len()).collect();
    for chunk in idx.chunks(MEASURE_CHUNK) {
        let (batch, _) = to_batch(shard, chunk);
        let out = forward(model, &batch)?;
        for (i, trace) in out.routing_trace.iter().enumerate() {
            for &j in trace {
                counts[[i, j]] += 1;
            }
        }
        tokens += batch.len() as u64;
    }
    ActivationProfile::from_counts(client_id, counts, tokens)
}

/// Volume-weighted mean of same-task donor profiles.
pub fn predict_profile(target: usize, donors: &[(&ActivationProfile, usize)]) -> Result<ActivationProfile> {
    let Some(((first, _), _)) = donors.split_first() else {
        return Err(Error::NoDonor(target));
    };
    let shape = first.probs.raw_dim();
    let mut acc = Array2::<f64>::zeros(shape);
    let mut total = 0.0;
    let mut tokens = 0u64;
    for (p, volume) in donors {
        if p.probs.raw_dim() != shape {
            return Err(Error::Input("donor profiles have mismatched shapes".into()));
        }
        acc.scaled_add(*volume as f64, &p.probs);
        total += *volume as f64;
        tokens += p.token_count;
    }
    if total <= 0.0 {
        return Err(Error::Input("donor data volumes sum to zero".into()));
    }
    if donors.len() == 1 {
        acc = first.probs.clone();
    } else {
        acc /= total;
    }
    Ok(ActivationProfile {
        client_id: target,
        probs: acc,
        counts: None,
        token_count: tokens,
    })
}

/// Cosine similarity of the flattened `L·E` probability vectors. Zero when
/// either vector is all-zero.
pub fn profile_similarity(a: &ActivationProfile, b: &ActivationProfile) -> Result<f64> {
    if a.probs.raw_dim() != b.probs.raw_dim() {
        return Err(Error::Input(format!(
            "profile shapes differ: {:?} vs {:?}",
            a.probs.dim(),
            b.probs.dim()
        )));
    }
    let dot: f64 = a.probs.iter().zip(b.probs.iter()).map(|(x, y)| x * y).sum();
    let na = a.probs.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.probs.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!(
            "all-zero activation profile (clients {} / {}); similarity set to 0",
            a.client_id,
            b.client_id
        );
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// Similarity-weighted estimate of every expert's activation probability
/// from reference peers: `Σ sim·p / Σ sim`. Falls back to the plain mean if
/// every similarity is zero.
pub fn estimate_from_peers(peers: &[(f64, &ActivationProfile)]) -> Result<Array2<f64>> {
    let Some((_, first)) = peers.first() else {
        return Err(Error::Input("no reference peers".into()));
    };
    let mut acc = Array2::<f64>::zeros(first.probs.raw_dim());
    let weight: f64 = peers.iter().map(|(s, _)| s).sum();
    for (sim, p) in peers {
        if p.probs.raw_dim() != acc.raw_dim() {
            return Err(Error::Input("peer profiles have mismatched shapes".into()));
        }
        let w = if weight > 0.0 { *sim } else { 1.0 };
        acc.scaled_add(w, &p.probs);
    }
    let denom = if weight > 0.0 { weight } else { peers.len() as f64 };
    Ok(acc / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::substream;
    use ndarray::array;

    fn prof(id: usize, p: Array2<f64>) -> ActivationProfile {
        ActivationProfile { client_id: id, probs: p, counts: None, token_count: 10 }
    }

    #[test]
    fn counts_to_probabilities() {
        let p = ActivationProfile::from_counts(0, array![[25, 75]], 100).unwrap();
        assert_eq!(p.probs[[0, 0]], 0.25);
    }

    #[test]
    fn single_expert_submodel_profile() {
        let cfg = ModelConfig { experts_per_layer: 3, vocab_size: 10, ..ModelConfig::default() };
        let m = MoeModel::init(&cfg, &mut substream(1, "init", &[])).unwrap();
        let sub = m.extract(&[vec![false, true, false], vec![false, false, true]]).unwrap();
        let shard: Vec<Sample> = (0..5).map(|i| Sample { tokens: vec![i, i + 1, 2], label: 0 }).collect();
        let p = measure_profile(&sub, &shard, 4).unwrap();
        assert_eq!(p.probs, array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(p.token_count, 15);
        assert!(measure_profile(&sub, &[], 4).is_err());
    }

    #[test]
    fn one_donor_prediction_is_exact_copy() {
        let d = prof(1, array![[0.1, 0.9], [0.3, 0.7]]);
        let p = predict_profile(5, &[(&d, 123)]).unwrap();
        assert_eq!(p.probs, d.probs);
        assert_eq!(p.client_id, 5);
    }

    #[test]
    fn equal_volume_midpoint_and_weighted_mean() {
        let a = prof(1, array![[0.2, 0.8]]);
        let b = prof(2, array![[0.4, 0.6]]);
        let p = predict_profile(0, &[(&a, 50), (&b, 50)]).unwrap();
        assert!((p.probs[[0, 0]] - 0.3).abs() < 1e-15);

        let a = prof(1, array![[0.8, 0.2]]);
        let b = prof(2, array![[0.4, 0.6]]);
        let p = predict_profile(0, &[(&a, 100), (&b, 300)]).unwrap();
        assert!((p.probs[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_donor_is_error() {
        assert!(matches!(predict_profile(3, &[]), Err(Error::NoDonor(3))));
    }

    #[test]
    fn similarity_examples() {
        let a = prof(0, array![[0.5, 0.5]]);
        assert!((profile_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let x = prof(0, array![[1.0, 0.0]]);
        let y = prof(1, array![[0.0, 1.0]]);
        assert_eq!(profile_similarity(&x, &y).unwrap(), 0.0);
        let b = prof(1, array![[0.8, 0.2]]);
        let expected = 0.5 / (0.5f64.sqrt() * 0.68f64.sqrt());
        assert!((profile_similarity(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.85749).abs() < 1e-5);
        let z = prof(2, array![[0.0, 0.0]]);
        assert_eq!(profile_similarity(&a, &z).unwrap(), 0.0);
        let bad = prof(3, array![[1.0], [0.0]]);
        assert!(profile_similarity(&a, &bad).is_err());
    }

    #[test]
    fn peer_estimate_matches_worked_example() {
        // sims 0.9 and 0.6, candidate probs 0.5 and 0.2 → 0.38.
        let a = prof(1, array![[0.5, 0.5]]);
        let b = prof(2, array![[0.2, 0.8]]);
        let est = estimate_from_peers(&[(0.9, &a), (0.6, &b)]).unwrap();
        assert!((est[[0, 0]] - 0.38).abs() < 1e-12);
    }
}
