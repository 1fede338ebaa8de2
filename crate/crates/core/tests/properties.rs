use proptest::prelude::*;

use greenprune::archspec::{builtin, infer_shapes, LayerSpec, NetworkArch};
use greenprune::energy::{layer_energy, network_energy, selection_probs, EnergyConstants};
use greenprune::hybrid::{
    hybrid_from_cache, route, threshold_sweep, CachedPrediction, PredictionCache, Route,
};
use greenprune::pruner::{prune_seeded, PruningConfig};
use greenprune::synthdata::{generate, Stratum, SyntheticConfig};

fn conv_arch(c1: usize, c2: usize, k: usize) -> NetworkArch {
    NetworkArch::new(
        (3, 12, 12),
        vec![
            LayerSpec::conv(3, c1, k, 1, k / 2).with_prunable(true),
            LayerSpec::conv(c1, c2, k, 1, k / 2).with_prunable(true),
        ],
    )
}

fn cache_strategy() -> impl Strategy<Value = PredictionCache> {
    prop::collection::vec(
        (
            0.0f64..10.0,
            any::<bool>(),
            prop::array::uniform3(0.0f64..100.0),
            prop::array::uniform3(0.0f64..100.0),
        ),
        2..60,
    )
    .prop_map(|rows| PredictionCache {
        entries: rows
            .into_iter()
            .enumerate()
            .map(|(id, (sigma, hard, p, u))| CachedPrediction {
                id,
                stratum: if hard { Stratum::Hard } else { Stratum::Easy },
                target: vec![40.0, 30.0, 30.0],
                sigma_agg: sigma,
                pruned_mu: p.to_vec(),
                unpruned_mu: u.to_vec(),
            })
            .collect(),
        e_pruned: 1e-7,
        e_unpruned: 6e-7,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn more_filters_cost_more(c1 in 1usize..12, c2 in 1usize..12, k in prop::sample::select(vec![1usize, 3, 5])) {
        let c = EnergyConstants::default();
        let small = infer_shapes(&conv_arch(c1, c2, k)).unwrap();
        let big = infer_shapes(&conv_arch(c1 + 1, c2, k)).unwrap();
        prop_assert!(network_energy(&big, &c).unwrap().network_total
            > network_energy(&small, &c).unwrap().network_total);
        for l in &small.layers {
            let e = layer_energy(l, &c).unwrap();
            prop_assert_eq!(e.e_total, e.e_flops + e.e_access);
        }
    }

    #[test]
    fn selection_probs_are_a_distribution(c1 in 1usize..12, c2 in 1usize..12) {
        let arch = conv_arch(c1, c2, 3);
        let eligible = arch.prunable_layers().into_iter().collect();
        let p = selection_probs(&arch, &EnergyConstants::default(), &eligible).unwrap();
        let sum: f64 = p.iter().map(|(_, p)| p).sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|(_, p)| *p > 0.0));
    }

    #[test]
    fn pruning_meets_quota_and_floor(eps in 0.05f64..0.7, seed in any::<u64>(), floor in 1usize..4) {
        let arch = builtin("vgg-tiny").unwrap();
        let total = infer_shapes(&arch).unwrap().prunable_filter_count();
        let cfg = PruningConfig { epsilon: eps, min_filters: floor, seed };
        let (pruned, plan) = prune_seeded(&arch, &cfg, &EnergyConstants::default()).unwrap();
        prop_assert_eq!(plan.removals.len(), (eps * total as f64).ceil() as usize);
        prop_assert!(pruned.layers.iter().filter(|l| l.prunable).all(|l| l.c_out >= floor));
        prop_assert!(plan.energy_trace.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn routing_is_nested_and_energy_exact(cache in cache_strategy(), t1 in 0.0f64..10.0, dt in 0.0f64..5.0) {
        let lo = hybrid_from_cache(&cache, t1).unwrap();
        let hi = hybrid_from_cache(&cache, t1 + dt).unwrap();
        for (a, b) in lo.per_sample.iter().zip(&hi.per_sample) {
            // re-inferred at the higher threshold implies re-inferred at the lower
            if route(b.sigma_agg, t1 + dt) == Route::Reinfer {
                prop_assert_eq!(route(a.sigma_agg, t1), Route::Reinfer);
            }
        }
        prop_assert!(hi.reinferred_count <= lo.reinferred_count);
        let n = cache.len() as f64;
        prop_assert_eq!(lo.total_energy, n * cache.e_pruned + lo.reinferred_count as f64 * cache.e_unpruned);
    }

    #[test]
    fn sweep_rows_match_single_calls(cache in cache_strategy()) {
        let mut taus: Vec<f64> = cache.sigmas();
        taus.push(0.0);
        taus.push(f64::INFINITY);
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        let sweep = threshold_sweep(&cache, &taus).unwrap();
        for row in &sweep.rows {
            let single = hybrid_from_cache(&cache, row.tau).unwrap();
            prop_assert_eq!(row.n_reinferred, single.reinferred_count);
            prop_assert_eq!(row.energy_j, single.total_energy);
            prop_assert_eq!(row.rmse_overall, single.rmse_overall);
        }
    }
}

#[test]
fn generated_targets_are_percentages() {
    let ds = generate(&SyntheticConfig {
        n_samples: 50,
        seed: 8,
        ..SyntheticConfig::default()
    })
    .unwrap();
    for s in ds.iter() {
        let sum: f64 = s.target.iter().sum();
        assert!((sum - 100.0).abs() < 1e-9, "sample {} sums to {sum}", s.id);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let again = generate(&SyntheticConfig {
        n_samples: 50,
        seed: 8,
        ..SyntheticConfig::default()
    })
    .unwrap();
    assert_eq!(ds, again);
}
