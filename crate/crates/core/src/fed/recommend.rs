//! Similarity-driven expert recommendation with revert-on-regression.
//!
//! A client that stops improving borrows structure from its `K` most similar
//! peers: it moves its expert count toward their average, adding the
//! non-retained experts the peers rate highest or pruning its own lowest
//! rated ones. The change is exploratory: if the next sampled score does not
//! improve, the old plan is restored and frozen for good.

use serde::{Deserialize, Serialize};

use super::client::ClientState;
use crate::activation::{estimate_from_peers, profile_similarity};
use crate::error::{Error, Result};
use crate::model::{mem_bytes, MemoryMode, ModelConfig};
use crate::search::{min_coverage, SubmodelPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecommendationConfig {
    /// Size of the reference set.
    pub k: usize,
    /// Sampled rounds without improvement before adjusting.
    pub patience: usize,
    /// Minimum score gain that counts as improvement.
    pub delta: f64,
}

impl Default for RecommendationConfig {
    fn default() -> Self {
        Self {
            k: 3,
            patience: 3,
            delta: 1e-3,
        }
    }
}

impl RecommendationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.patience == 0 || !(self.delta >= 0.0) {
            return Err(Error::Config(
                "recommendation.k and patience must be >= 1, delta >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AdjustEvent {
    /// Plan changed; the old plan is kept for a possible revert.
    Adjusted { client_id: usize, from: usize, to: usize },
    /// Stalled, but the peers' average matched (or no legal change existed).
    Unchanged { client_id: usize },
    /// Adjusted plan improved the score and is kept.
    Accepted { client_id: usize },
    /// Adjusted plan did not improve: restored and frozen.
    Reverted { client_id: usize },
}

/// Top-`k` other clients by similarity to `me` (ties by ascending id).
pub fn reference_set(clients: &[ClientState], me: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    let own = &clients[me].profile;
    let mut sims = Vec::with_capacity(clients.len());
    for (idx, c) in clients.iter().enumerate() {
        if idx != me {
            sims.push((idx, profile_similarity(own, &c.profile)?));
        }
    }
    sims.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(clients[a.0].client_id.cmp(&clients[b.0].client_id))
    });
    sims.truncate(k);
    Ok(sims)
}

/// Move `clients[me]` toward its reference set's average expert count.
/// Returns the new plan, or `None` when nothing changes.
pub fn recommend_plan(
    clients: &[ClientState],
    me: usize,
    rec: &RecommendationConfig,
    cfg: &ModelConfig,
    mode: MemoryMode,
) -> Result<Option<SubmodelPlan>> {
    let refs = reference_set(clients, me, rec.k)?;
    if refs.is_empty() {
        return Ok(None);
    }
    let client = &clients[me];
    let mean = refs
        .iter()
        .map(|&(idx, _)| clients[idx].plan.expert_count() as f64)
        .sum::<f64>()
        / refs.len() as f64;
    let target = (mean + 0.5).floor() as i64;
    let n = target - client.plan.expert_count() as i64;
    if n == 0 {
        return Ok(None);
    }
    let peers: Vec<(f64, &crate::activation::ActivationProfile)> =
        refs.iter().map(|&(idx, s)| (s, &clients[idx].profile)).collect();
    let est = estimate_from_peers(&peers)?;

    let mut mask = client.plan.mask.clone();
    let mut cells: Vec<(usize, usize)> = (0..mask.len())
        .flat_map(|i| (0..mask[i].len()).map(move |j| (i, j)))
        .collect();
    let mut changed = 0usize;
    if n > 0 {
        cells.retain(|&(i, j)| !mask[i][j]);
        cells.sort_by(|a, b| est[[b.0, b.1]].partial_cmp(&est[[a.0, a.1]]).unwrap().then(a.cmp(b)));
        for (i, j) in cells {
            if changed as i64 == n {
                break;
            }
            mask[i][j] = true;
            if mem_bytes(cfg, &mask, mode) > client.budget {
                mask[i][j] = false;
                continue;
            }
            changed += 1;
        }
    } else {
        cells.retain(|&(i, j)| mask[i][j]);
        cells.sort_by(|a, b| est[[a.0, a.1]].partial_cmp(&est[[b.0, b.1]]).unwrap().then(a.cmp(b)));
        for (i, j) in cells {
            if changed as i64 == -n {
                break;
            }
            if mask[i].iter().filter(|&&x| x).count() <= 1 {
                continue;
            }
            mask[i][j] = false;
            changed += 1;
        }
    }
    if changed == 0 {
        return Ok(None);
    }
    Ok(Some(SubmodelPlan {
        client_id: client.client_id,
        theta: min_coverage(&client.profile.probs, &mask),
        mem_estimate: mem_bytes(cfg, &mask, mode),
        mask,
    }))
}

/// Post-aggregation structural step for this round's participants.
/// `scores` lists `(client index, validation score)` for clients that
/// trained successfully; profiles must already be refreshed.
pub fn adjust_submodels(
    clients: &mut [ClientState],
    scores: &[(usize, f64)],
    rec: &RecommendationConfig,
    cfg: &ModelConfig,
    mode: MemoryMode,
) -> Result<Vec<AdjustEvent>> {
    let mut order: Vec<(usize, f64)> = scores.to_vec();
    order.sort_by_key(|&(idx, _)| clients[idx].client_id);
    let mut events = Vec::new();
    for (idx, score) in order {
        if clients[idx].frozen {
            continue;
        }
        let client_id = clients[idx].client_id;
        let improved = score > clients[idx].best_score + rec.delta;
        if let Some(prev) = clients[idx].previous_plan.take() {
            let c = &mut clients[idx];
            if improved {
                c.best_score = score;
                c.patience = 0;
                events.push(AdjustEvent::Accepted { client_id });
            } else {
                c.plan = prev;
                c.frozen = true;
                events.push(AdjustEvent::Reverted { client_id });
            }
            continue;
        }
        if improved {
            clients[idx].best_score = score;
            clients[idx].patience = 0;
            continue;
        }
        clients[idx].patience += 1;
        if clients[idx].patience < rec.patience {
            continue;
        }
        clients[idx].patience = 0;
        match recommend_plan(clients, idx, rec, cfg, mode)? {
            Some(plan) => {
                let c = &mut clients[idx];
                let from = c.plan.expert_count();
                let to = plan.expert_count();
                c.previous_plan = Some(std::mem::replace(&mut c.plan, plan));
                events.push(AdjustEvent::Adjusted { client_id, from, to });
            }
            None => events.push(AdjustEvent::Unchanged { client_id }),
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};

    use super::*;
    use crate::activation::ActivationProfile;
    use crate::model::OptimizerKind;

    const ADAM: MemoryMode = MemoryMode::Train(OptimizerKind::Adam);

    fn cfg() -> ModelConfig {
        ModelConfig { num_layers: 2, experts_per_layer: 4, ..ModelConfig::default() }
    }

    fn client(id: usize, counts: [usize; 2], probs: Array2<f64>, budget: u64) -> ClientState {
        let mask: Vec<Vec<bool>> = counts.iter().map(|&n| (0..4).map(|j| j < n).collect()).collect();
        let prof = ActivationProfile { client_id: id, probs: probs.clone(), counts: None, token_count: 10 };
        let plan = SubmodelPlan::new(id, mask, &probs, &cfg(), ADAM);
        ClientState::new(id, 0, budget, 10, plan, prof)
    }

    fn skewed() -> Array2<f64> {
        array![[0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1]]
    }

    #[test]
    fn reference_set_orders_by_similarity_then_id() {
        let a = array![[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]];
        let b = array![[0.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let clients = vec![
            client(0, [1, 1], a.clone(), u64::MAX),
            client(1, [1, 1], b.clone(), u64::MAX),
            client(2, [1, 1], a.clone(), u64::MAX),
            client(3, [1, 1], a, u64::MAX),
        ];
        let refs = reference_set(&clients, 0, 2).unwrap();
        assert_eq!(refs.iter().map(|r| r.0).collect::<Vec<_>>(), vec![2, 3]);
        assert!((refs[0].1 - 1.0).abs() < 1e-12);
        let all = reference_set(&clients, 0, 10).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[2].0, 1);
    }

    #[test]
    fn growth_adds_highest_estimated_experts() {
        let clients = vec![
            client(0, [1, 1], skewed(), u64::MAX),
            client(1, [2, 2], skewed(), u64::MAX),
            client(2, [2, 2], skewed(), u64::MAX),
            client(3, [2, 2], skewed(), u64::MAX),
        ];
        let rec = RecommendationConfig::default();
        let plan = recommend_plan(&clients, 0, &rec, &cfg(), ADAM).unwrap().unwrap();
        assert_eq!(plan.expert_count(), 4);
        // Best unretained cells: (0,3) at 0.4, then a 0.3 tie broken toward layer 0.
        assert_eq!(plan.mask[0], vec![true, false, true, true]);
        assert_eq!(plan.mask[1], vec![true, false, false, false]);
    }

    #[test]
    fn shrinking_prunes_lowest_and_keeps_layers_nonempty() {
        let clients = vec![
            client(0, [4, 1], skewed(), u64::MAX),
            client(1, [1, 1], skewed(), u64::MAX),
            client(2, [1, 1], skewed(), u64::MAX),
            client(3, [1, 1], skewed(), u64::MAX),
        ];
        let rec = RecommendationConfig::default();
        let plan = recommend_plan(&clients, 0, &rec, &cfg(), ADAM).unwrap().unwrap();
        assert_eq!(plan.expert_count(), 2);
        assert!(plan.every_layer_nonempty());
        assert_eq!(plan.mask[0], vec![false, false, false, true]);
    }

    #[test]
    fn growth_respects_budget() {
        let c = cfg();
        let one_each = vec![vec![true, false, false, false]; 2];
        let budget = mem_bytes(&c, &one_each, ADAM);
        let clients = vec![
            client(0, [1, 1], skewed(), budget),
            client(1, [3, 3], skewed(), u64::MAX),
            client(2, [3, 3], skewed(), u64::MAX),
            client(3, [3, 3], skewed(), u64::MAX),
        ];
        let rec = RecommendationConfig::default();
        assert!(recommend_plan(&clients, 0, &rec, &c, ADAM).unwrap().is_none());
    }

    #[test]
    fn matching_average_is_unchanged() {
        let clients = vec![
            client(0, [2, 2], skewed(), u64::MAX),
            client(1, [2, 2], skewed(), u64::MAX),
            client(2, [2, 2], skewed(), u64::MAX),
            client(3, [2, 2], skewed(), u64::MAX),
        ];
        let rec = RecommendationConfig::default();
        let mut clients = clients;
        let mut all = Vec::new();
        for _ in 0..4 {
            all.extend(adjust_submodels(&mut clients, &[(0, 0.5)], &rec, &cfg(), ADAM).unwrap());
        }
        assert_eq!(all, vec![AdjustEvent::Unchanged { client_id: 0 }]);
    }

    #[test]
    fn improvement_after_adjustment_is_accepted() {
        let mut clients = vec![
            client(0, [1, 1], skewed(), u64::MAX),
            client(1, [2, 2], skewed(), u64::MAX),
            client(2, [2, 2], skewed(), u64::MAX),
            client(3, [2, 2], skewed(), u64::MAX),
        ];
        let rec = RecommendationConfig::default();
        let mut events = Vec::new();
        for s in [0.5, 0.5, 0.5, 0.5, 0.6] {
            events.extend(adjust_submodels(&mut clients, &[(0, s)], &rec, &cfg(), ADAM).unwrap());
        }
        assert_eq!(
            events,
            vec![
                AdjustEvent::Adjusted { client_id: 0, from: 2, to: 4 },
                AdjustEvent::Accepted { client_id: 0 }
            ]
        );
        assert_eq!(clients[0].plan.expert_count(), 4);
        assert!(!clients[0].frozen && clients[0].previous_plan.is_none());
        assert_eq!(clients[0].best_score, 0.6);
    }

    #[test]
    fn frozen_clients_are_skipped() {
        let mut clients = vec![client(0, [1, 1], skewed(), u64::MAX), client(1, [3, 3], skewed(), u64::MAX)];
        clients[0].frozen = true;
        let rec = RecommendationConfig { k: 1, patience: 1, delta: 0.0 };
        let before = clients.clone();
        let events = adjust_submodels(&mut clients, &[(0, 0.0), (0, 0.0)], &rec, &cfg(), ADAM).unwrap();
        assert!(events.is_empty());
        assert_eq!(clients, before);
    }

    #[test]
    fn config_validation() {
        assert!(RecommendationConfig::default().validate().is_ok());
        assert!(RecommendationConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(RecommendationConfig { delta: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
