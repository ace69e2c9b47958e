//! Memory-constrained submodel initialisation.
//!
//! For one client we look for the largest threshold `θ` such that every
//! layer keeps experts whose activation probabilities sum to at least `θ`,
//! while the resulting submodel fits in `α_mem · M_k`. The heuristic bisects
//! on `θ`, building the smallest plan for each probe; the exhaustive search
//! enumerates every mask and serves as an oracle on small instances.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationProfile;
use crate::error::{Error, Result};
use crate::model::{mem_bytes, ExpertMask, MemoryMode, ModelConfig};

/// Slack on per-layer coverage comparisons.
pub const COVERAGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Fraction of the budget usable at initialisation.
    pub alpha_mem: f64,
    /// Stop bisecting once the `θ` interval is narrower than this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            alpha_mem: 0.75,
            tolerance: 1e-3,
            max_iterations: 20,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_mem > 0.0 && self.alpha_mem <= 1.0) {
            return Err(Error::Config("search.alpha_mem must lie in (0, 1]".into()));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config(
                "search.tolerance must be > 0 and max_iterations >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Bytes usable at initialisation for a client with `budget` bytes.
    pub fn usable(&self, budget: u64) -> u64 {
        (self.alpha_mem * budget as f64).floor() as u64
    }
}

/// The client-expert map entry for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmodelPlan {
    pub client_id: usize,
    pub mask: ExpertMask,
    /// Achieved minimum per-layer coverage.
    pub theta: f64,
    /// Bytes under the search's memory mode.
    pub mem_estimate: u64,
}

impl SubmodelPlan {
    pub fn new(client_id: usize, mask: ExpertMask, probs: &ndarray::Array2<f64>, cfg: &ModelConfig, mode: MemoryMode) -> Self {
        let theta = min_coverage(probs, &mask);
        let mem_estimate = mem_bytes(cfg, &mask, mode);
        Self {
            client_id,
            mask,
            theta,
            mem_estimate,
        }
    }

    pub fn expert_count(&self) -> usize {
        self.mask.iter().flatten().filter(|&&x| x).count()
    }

    pub fn layer_counts(&self) -> Vec<usize> {
        self.mask.iter().map(|r| r.iter().filter(|&&x| x).count()).collect()
    }

    pub fn retained(&self, layer: usize) -> Vec<usize> {
        self.mask[layer]
            .iter()
            .enumerate()
            .filter_map(|(j, &x)| x.then_some(j))
            .collect()
    }

    pub fn every_layer_nonempty(&self) -> bool {
        self.mask.iter().all(|r| r.iter().any(|&x| x))
    }
}

pub fn layer_coverages(probs: &ndarray::Array2<f64>, mask: &[Vec<bool>]) -> Vec<f64> {
    probs
        .rows()
        .into_iter()
        .zip(mask)
        .map(|(p, row)| p.iter().zip(row).filter(|(_, &x)| x).map(|(v, _)| v).sum())
        .collect()
}

pub fn min_coverage(probs: &ndarray::Array2<f64>, mask: &[Vec<bool>]) -> f64 {
    layer_coverages(probs, mask)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Experts of one layer by descending probability, ties by ascending index.
pub fn ranked_experts(p: ArrayView1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Shortest descending-probability prefix per layer reaching `θ`; always at
/// least one expert per layer.
pub fn smallest_mask_for_theta(probs: &ndarray::Array2<f64>, theta: f64) -> ExpertMask {
    probs
        .rows()
        .into_iter()
        .map(|p| {
            let mut row = vec![false; p.len()];
            let mut cum = 0.0;
            for (rank, j) in ranked_experts(p).into_iter().enumerate() {
                if rank > 0 && cum >= theta - COVERAGE_EPS {
                    break;
                }
                row[j] = true;
                cum += p[j];
            }
            row
        })
        .collect()
}

pub fn smallest_plan_for_theta(
    profile: &ActivationProfile,
    theta: f64,
    cfg: &ModelConfig,
    mode: MemoryMode,
) -> SubmodelPlan {
    let mask = smallest_mask_for_theta(&profile.probs, theta);
    SubmodelPlan::new(profile.client_id, mask, &profile.probs, cfg, mode)
}

fn check_shape(profile: &ActivationProfile, cfg: &ModelConfig) -> Result<()> {
    if profile.layers() != cfg.num_layers || profile.experts() != cfg.experts_per_layer {
        return Err(Error::Input(format!(
            "profile is {}x{}, model is {}x{}",
            profile.layers(),
            profile.experts(),
            cfg.num_layers,
            cfg.experts_per_layer
        )));
    }
    Ok(())
}

/// Bisection on `θ ∈ [0, 1]`: a feasible probe raises the lower bound, an
/// infeasible one lowers the upper bound. Returns the best feasible plan seen.
pub fn heuristic_search(
    profile: &ActivationProfile,
    budget: u64,
    search: &SearchConfig,
    cfg: &ModelConfig,
    mode: MemoryMode,
) -> Result<SubmodelPlan> {
    check_shape(profile, cfg)?;
    let usable = search.usable(budget);
    let minimal = smallest_plan_for_theta(profile, 0.0, cfg, mode);
    if minimal.mem_estimate > usable {
        return Err(Error::Infeasible {
            client_id: profile.client_id,
            needed: minimal.mem_estimate,
            available: usable,
            deficit: minimal.mem_estimate - usable,
        });
    }
    let full = smallest_plan_for_theta(profile, 1.0, cfg, mode);
    if full.mem_estimate <= usable {
        return Ok(full);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best = minimal;
    let mut iterations = 1;
    while hi - lo >= search.tolerance && iterations < search.max_iterations {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let plan = smallest_plan_for_theta(profile, mid, cfg, mode);
        if plan.mem_estimate <= usable {
            lo = mid;
            if plan.theta > best.theta
                || (plan.theta == best.theta && plan.expert_count() < best.expert_count())
            {
                best = plan;
            }
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// Enumerate every mask with at least one expert per layer; maximise the
/// minimum layer coverage, then prefer fewer experts, then the
/// lexicographically smallest mask.
pub fn exhaustive_search(
    profile: &ActivationProfile,
    budget: u64,
    search: &SearchConfig,
    cfg: &ModelConfig,
    mode: MemoryMode,
) -> Result<SubmodelPlan> {
    check_shape(profile, cfg)?;
    let (l, e) = (cfg.num_layers, cfg.experts_per_layer);
    if l * e > 16 {
        return Err(Error::TooLarge(l * e));
    }
    let usable = search.usable(budget);
    let mut best: Option<(f64, usize, ExpertMask)> = None;
    for bits in 0u32..(1u32 << (l * e)) {
        let mask: ExpertMask = (0..l)
            .map(|i| (0..e).map(|j| bits >> (i * e + j) & 1 == 1).collect())
            .collect();
        if mask.iter().any(|r| !r.iter().any(|&x| x)) {
            continue;
        }
        if mem_bytes(cfg, &mask, mode) > usable {
            continue;
        }
        let theta = min_coverage(&profile.probs, &mask);
        let count = bits.count_ones() as usize;
        let better = match &best {
            None => true,
            Some((bt, bc, bm)) => {
                if (theta - bt).abs() > 1e-12 {
                    theta > *bt
                } else if count != *bc {
                    count < *bc
                } else {
                    mask < *bm
                }
            }
        };
        if better {
            best = Some((theta, count, mask));
        }
    }
    match best {
        Some((_, _, mask)) => Ok(SubmodelPlan::new(profile.client_id, mask, &profile.probs, cfg, mode)),
        None => {
            let minimal = smallest_plan_for_theta(profile, 0.0, cfg, mode);
            Err(Error::Infeasible {
                client_id: profile.client_id,
                needed: minimal.mem_estimate,
                available: usable,
                deficit: minimal.mem_estimate.saturating_sub(usable),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn cfg(l: usize, e: usize) -> ModelConfig {
        ModelConfig {
            num_layers: l,
            experts_per_layer: e,
            embed_dim: 4,
            hidden_dim: 4,
            vocab_size: 8,
            num_classes: 2,
            bytes_per_param: 1,
            expert_bias: false,
        }
    }

    fn prof(p: Array2<f64>) -> ActivationProfile {
        ActivationProfile { client_id: 7, probs: p, counts: None, token_count: 100 }
    }

    /// Bytes of dense part plus `blocks` experts (with router columns), eval mode.
    fn bytes(c: &ModelConfig, blocks: u64) -> u64 {
        c.dense_param_count() + blocks * (c.expert_param_count() + c.router_column_count())
    }

    #[test]
    fn theta_zero_keeps_top_expert_only() {
        let m = smallest_mask_for_theta(&array![[0.1, 0.6, 0.3], [0.5, 0.5, 0.0]], 0.0);
        assert_eq!(m, vec![vec![false, true, false], vec![true, false, false]]);
    }

    #[test]
    fn theta_one_keeps_all_positive_experts() {
        let m = smallest_mask_for_theta(&array![[0.1, 0.6, 0.3, 0.0]], 1.0);
        assert_eq!(m, vec![vec![true, true, true, false]]);
    }

    #[test]
    fn prefix_example() {
        let m = smallest_mask_for_theta(&array![[0.4, 0.3, 0.2, 0.1]], 0.65);
        assert_eq!(m, vec![vec![true, true, false, false]]);
    }

    #[test]
    fn worked_two_layer_instance() {
        let c = cfg(2, 4);
        let p = prof(array![[0.4, 0.3, 0.2, 0.1], [0.7, 0.1, 0.1, 0.1]]);
        let s = SearchConfig { alpha_mem: 1.0, ..SearchConfig::default() };
        let budget = bytes(&c, 4);
        let h = heuristic_search(&p, budget, &s, &c, MemoryMode::Eval).unwrap();
        let x = exhaustive_search(&p, budget, &s, &c, MemoryMode::Eval).unwrap();
        assert!((h.theta - 0.7).abs() < 1e-12);
        assert!((x.theta - 0.7).abs() < 1e-12);
        assert_eq!(h.mask, vec![vec![true, true, false, false], vec![true, false, false, false]]);
        assert_eq!(x.mask, h.mask);
        // θ = 0.8 would need five blocks.
        assert_eq!(smallest_plan_for_theta(&p, 0.8, &c, MemoryMode::Eval).expert_count(), 5);
    }

    #[test]
    fn unconstrained_budget_reaches_full_coverage() {
        let c = cfg(2, 4);
        let p = prof(array![[0.4, 0.3, 0.2, 0.1], [0.7, 0.3, 0.0, 0.0]]);
        let s = SearchConfig::default();
        let h = heuristic_search(&p, u64::MAX / 4, &s, &c, MemoryMode::Eval).unwrap();
        assert!(h.theta >= 1.0 - 1e-3);
        assert_eq!(h.layer_counts(), vec![4, 2]);
    }

    #[test]
    fn infeasible_budget_names_deficit() {
        let c = cfg(2, 4);
        let p = prof(array![[0.4, 0.3, 0.2, 0.1], [0.7, 0.1, 0.1, 0.1]]);
        let s = SearchConfig { alpha_mem: 1.0, ..SearchConfig::default() };
        let need = bytes(&c, 2);
        match heuristic_search(&p, need - 3, &s, &c, MemoryMode::Eval) {
            Err(Error::Infeasible { client_id, deficit, .. }) => {
                assert_eq!(client_id, 7);
                assert_eq!(deficit, 3);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn one_block_per_layer_budget_forces_argmax() {
        let c = cfg(2, 3);
        let p = prof(array![[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]]);
        let s = SearchConfig { alpha_mem: 1.0, ..SearchConfig::default() };
        let x = exhaustive_search(&p, bytes(&c, 2), &s, &c, MemoryMode::Eval).unwrap();
        assert!((x.theta - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_profile_theta_is_k_over_e() {
        let c = cfg(2, 4);
        let p = prof(Array2::from_elem((2, 4), 0.25));
        let s = SearchConfig { alpha_mem: 1.0, ..SearchConfig::default() };
        // Budget for 5 blocks: best balanced is 2 per layer (θ = 0.5).
        let x = exhaustive_search(&p, bytes(&c, 5), &s, &c, MemoryMode::Eval).unwrap();
        assert!((x.theta - 0.5).abs() < 1e-12);
        assert_eq!(x.expert_count(), 4);
    }

    #[test]
    fn exhaustive_guard() {
        let c = cfg(3, 6);
        let p = prof(Array2::from_elem((3, 6), 1.0 / 6.0));
        let s = SearchConfig::default();
        assert!(matches!(
            exhaustive_search(&p, u64::MAX / 4, &s, &c, MemoryMode::Eval),
            Err(Error::TooLarge(18))
        ));
    }

    #[test]
    fn alpha_must_be_in_unit_interval() {
        assert!(SearchConfig { alpha_mem: 0.0, ..SearchConfig::default() }.validate().is_err());
        assert!(SearchConfig { alpha_mem: 1.2, ..SearchConfig::default() }.validate().is_err());
    }
}
