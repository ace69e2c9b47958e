//! Property-based invariants over profiles, search, memory, metrics and
//! aggregation.

use fedmoe_core::activation::{estimate_from_peers, predict_profile, profile_similarity};
use fedmoe_core::fed::aggregate::{modular_aggregate, EdgeUpdate};
use fedmoe_core::metrics::{coefficient_of_variation, cv_index};
use fedmoe_core::model::{mem_bytes, MemoryMode, OptimizerKind};
use fedmoe_core::rng::substream;
use fedmoe_core::search::{exhaustive_search, heuristic_search, min_coverage};
use fedmoe_core::{ActivationProfile, ModelConfig, MoeModel, SearchConfig};
use ndarray::Array2;
use proptest::prelude::*;

const ADAM: MemoryMode = MemoryMode::Train(OptimizerKind::Adam);

fn small_cfg(l: usize, e: usize) -> ModelConfig {
    ModelConfig { num_layers: l, experts_per_layer: e, embed_dim: 4, hidden_dim: 4, vocab_size: 8, num_classes: 3, ..ModelConfig::default() }
}

/// Row-stochastic profile drawn from positive weights.
fn profile_strategy(l: usize, e: usize) -> impl Strategy<Value = ActivationProfile> {
    prop::collection::vec(0.0f64..1.0, l * e).prop_map(move |w| {
        let mut p = Array2::from_shape_vec((l, e), w).unwrap();
        for mut row in p.rows_mut() {
            let s: f64 = row.sum();
            if s > 0.0 {
                row /= s;
            } else {
                row.fill(1.0 / e as f64);
            }
        }
        ActivationProfile { client_id: 0, probs: p, counts: None, token_count: 1 }
    })
}

fn mask_strategy(l: usize, e: usize) -> impl Strategy<Value = Vec<Vec<bool>>> {
    prop::collection::vec(prop::collection::vec(any::<bool>(), e), l)
}

proptest! {
    #[test]
    fn similarity_is_symmetric_bounded_and_scale_invariant(
        a in profile_strategy(2, 4),
        b in profile_strategy(2, 4),
        scale in 0.01f64..100.0,
    ) {
        let ab = profile_similarity(&a, &b).unwrap();
        let ba = profile_similarity(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
        let scaled = ActivationProfile { probs: &a.probs * scale, ..a.clone() };
        prop_assert!((profile_similarity(&scaled, &b).unwrap() - ab).abs() < 1e-9);
        prop_assert!((profile_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predicted_rows_sum_to_one(
        donors in prop::collection::vec((profile_strategy(3, 4), 1usize..500), 1..6),
    ) {
        let refs: Vec<(&ActivationProfile, usize)> = donors.iter().map(|(p, v)| (p, *v)).collect();
        let pred = predict_profile(7, &refs).unwrap();
        prop_assert_eq!(pred.client_id, 7);
        for s in pred.row_sums() {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn peer_estimate_is_a_convex_combination(
        peers in prop::collection::vec((0.0f64..1.0, profile_strategy(2, 3)), 1..5),
    ) {
        let refs: Vec<(f64, &ActivationProfile)> = peers.iter().map(|(s, p)| (*s, p)).collect();
        let est = estimate_from_peers(&refs).unwrap();
        for ((i, j), v) in est.indexed_iter() {
            let lo = peers.iter().map(|(_, p)| p.probs[[i, j]]).fold(f64::INFINITY, f64::min);
            let hi = peers.iter().map(|(_, p)| p.probs[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn search_plans_are_feasible_and_never_beat_the_oracle(
        prof in profile_strategy(2, 4),
        frac in 0.2f64..1.2,
    ) {
        let cfg = small_cfg(2, 4);
        let search = SearchConfig::default();
        let full = mem_bytes(&cfg, &vec![vec![true; 4]; 2], ADAM);
        let budget = (frac * full as f64) as u64;
        let heur = heuristic_search(&prof, budget, &search, &cfg, ADAM);
        let oracle = exhaustive_search(&prof, budget, &search, &cfg, ADAM);
        prop_assert_eq!(heur.is_ok(), oracle.is_ok());
        if let (Ok(h), Ok(o)) = (heur, oracle) {
            for plan in [&h, &o] {
                prop_assert!(plan.mem_estimate <= search.usable(budget));
                prop_assert!(plan.every_layer_nonempty());
                prop_assert!((plan.theta - min_coverage(&prof.probs, &plan.mask)).abs() < 1e-12);
            }
            prop_assert!(h.theta <= o.theta + 1e-12);
        }
    }

    #[test]
    fn memory_is_monotone_in_the_mask(
        mask in mask_strategy(3, 4),
        extra in (0usize..3, 0usize..4),
    ) {
        let cfg = small_cfg(3, 4);
        let mut bigger = mask.clone();
        bigger[extra.0][extra.1] = true;
        let modes = [MemoryMode::Eval, MemoryMode::Train(OptimizerKind::Sgd), ADAM];
        for m in modes {
            prop_assert!(mem_bytes(&cfg, &mask, m) <= mem_bytes(&cfg, &bigger, m));
        }
        prop_assert!(mem_bytes(&cfg, &mask, MemoryMode::Eval) <= mem_bytes(&cfg, &mask, ADAM));
    }

    #[test]
    fn cv_is_scale_invariant(
        scores in prop::collection::vec(0.01f64..1.0, 2..8),
        scale in 0.1f64..10.0,
    ) {
        let cv = coefficient_of_variation(&scores).unwrap();
        let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
        prop_assert!((coefficient_of_variation(&scaled).unwrap() - cv).abs() < 1e-9);
        prop_assert!(cv >= 0.0);
        let (cvs, cvi) = cv_index(&[scores.clone(), scaled]).unwrap();
        prop_assert!((cvi - cvs.iter().sum::<f64>() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn aggregating_identical_submodels_is_a_fixpoint(
        seed in 0u64..1000,
        masks in prop::collection::vec(mask_strategy(2, 3), 1..4),
        volumes in prop::collection::vec(1.0f64..100.0, 4),
    ) {
        let cfg = small_cfg(2, 3);
        let global = MoeModel::init(&cfg, &mut substream(seed, "prop", &[])).unwrap();
        let masks: Vec<Vec<Vec<bool>>> = masks
            .into_iter()
            .map(|mut m| {
                for row in &mut m {
                    if !row.iter().any(|&x| x) {
                        row[0] = true;
                    }
                }
                m
            })
            .collect();
        let subs: Vec<MoeModel> = masks.iter().map(|m| global.extract(m).unwrap()).collect();
        let updates: Vec<EdgeUpdate> = subs
            .iter()
            .enumerate()
            .map(|(k, m)| EdgeUpdate { client_id: k, model: m, volume: volumes[k] })
            .collect();
        let mut merged = global.clone();
        modular_aggregate(&mut merged, &updates).unwrap();
        for (a, b) in merged.flatten().iter().zip(global.flatten()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
