//! Stochastic filter pruning at initialization.
//!
//! Each iteration recomputes the per-layer energy of the partially pruned
//! network, samples one prunable layer with probability proportional to its
//! energy, and removes one uniformly chosen remaining filter from it. Layers
//! already at the `min_filters` floor drop out of the eligible set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archspec::{apply_mask, infer_shapes, NetworkArch, PruneMask};
use crate::energy::{network_energy, selection_probs_from_report, EnergyConstants};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningConfig {
    /// Fraction of prunable filters to remove, in (0, 1).
    pub epsilon: f64,
    pub min_filters: usize,
    pub seed: u64,
}

impl PruningConfig {
    pub fn new(epsilon: f64, seed: u64) -> Self {
        PruningConfig {
            epsilon,
            min_filters: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.min_filters == 0 {
            return Err(Error::Config("min_filters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub iteration: usize,
    pub layer_id: usize,
    /// Index into the layer's filters in the unpruned architecture.
    pub filter_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    pub removals: Vec<Removal>,
    pub quota: usize,
    pub per_layer_histogram: BTreeMap<usize, usize>,
    /// Filter count of every prunable layer before pruning.
    pub original_filters: BTreeMap<usize, usize>,
    /// Network energy (J) before pruning and after each removal.
    pub energy_trace: Vec<f64>,
}

impl PruningPlan {
    pub fn mask(&self, min_filters: usize) -> PruneMask {
        let mut mask = PruneMask::new(min_filters);
        for r in &self.removals {
            mask.remove(r.layer_id, r.filter_index);
        }
        mask
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "layer_id", "filter_index"])?;
        for r in &self.removals {
            w.serialize((r.iteration, r.layer_id, r.filter_index))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `⌈epsilon · prunable filters⌉`
pub fn removal_quota(arch: &NetworkArch, epsilon: f64) -> Result<usize> {
    let total = arch.prunable_filter_count();
    if total == 0 {
        return Err(Error::Pruning(
            "architecture has no prunable filters".into(),
        ));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    Ok(quota_for(total, epsilon))
}

fn quota_for(total: usize, epsilon: f64) -> usize {
    // Guard against 0.2 * 100 = 20.000000000000004 rounding up to 21.
    let exact = epsilon * total as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

/// Prune with a ChaCha8 stream seeded from `config.seed`.
pub fn prune_seeded(
    arch: &NetworkArch,
    config: &PruningConfig,
    constants: &EnergyConstants,
) -> Result<(NetworkArch, PruningPlan)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    prune_at_init(arch, config, constants, &mut rng)
}

pub fn prune_at_init<R: Rng + ?Sized>(
    arch: &NetworkArch,
    config: &PruningConfig,
    constants: &EnergyConstants,
    rng: &mut R,
) -> Result<(NetworkArch, PruningPlan)> {
    config.validate()?;
    let original = infer_shapes(arch)?;
    let quota = removal_quota(&original, config.epsilon)?;

    let original_filters: BTreeMap<usize, usize> = original
        .layers
        .iter()
        .filter(|l| l.prunable)
        .map(|l| (l.id, l.c_out))
        .collect();
    let capacity: usize = original_filters
        .values()
        .map(|&c| c.saturating_sub(config.min_filters))
        .sum();
    if quota > capacity {
        return Err(Error::Pruning(format!(
            "quota of {quota} filters exceeds the {capacity} removable under min_filters={}",
            config.min_filters
        )));
    }

    // Original filter indices still present in each prunable layer.
    let mut remaining: BTreeMap<usize, Vec<usize>> = original_filters
        .iter()
        .map(|(&id, &c)| (id, (0..c).collect()))
        .collect();
    let mut mask = PruneMask::new(config.min_filters);
    let mut current = original.clone();
    let mut report = network_energy(&current, constants)?;
    let mut energy_trace = vec![report.network_total];
    let mut removals = Vec::with_capacity(quota);

    for iteration in 0..quota {
        let eligible: BTreeSet<usize> = remaining
            .iter()
            .filter(|(_, filters)| filters.len() > config.min_filters)
            .map(|(&id, _)| id)
            .collect();
        if eligible.is_empty() {
            return Err(Error::Pruning(format!(
                "all prunable layers at the floor after {iteration} removals"
            )));
        }
        let probs = selection_probs_from_report(&report, &eligible)?;
        let layer_id = sample_layer(&probs, rng)?;

        let filters = remaining.get_mut(&layer_id).expect("eligible layer");
        let pick = rng.random_range(0..filters.len());
        let filter_index = filters.remove(pick);
        mask.remove(layer_id, filter_index);
        removals.push(Removal {
            iteration,
            layer_id,
            filter_index,
        });

        current = apply_mask(&original, &mask)?;
        report = network_energy(&current, constants)?;
        energy_trace.push(report.network_total);
    }

    let mut per_layer_histogram = BTreeMap::new();
    for r in &removals {
        *per_layer_histogram.entry(r.layer_id).or_insert(0) += 1;
    }
    Ok((
        current,
        PruningPlan {
            removals,
            quota,
            per_layer_histogram,
            original_filters,
            energy_trace,
        },
    ))
}

/// Draw one layer id from an energy-proportional distribution.
pub fn sample_layer<R: Rng + ?Sized>(probs: &[(usize, f64)], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(probs.iter().map(|(_, p)| *p))
        .map_err(|e| Error::Pruning(format!("invalid selection distribution: {e}")))?;
    Ok(probs[dist.sample(rng)].0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub layer_id: usize,
    pub original_filters: usize,
    pub removed: usize,
    /// Percentage of the layer's original filters removed.
    pub removed_pct: f64,
}

/// Per-layer removal table, one row per layer that lost filters.
pub fn summarize(plan: &PruningPlan) -> Vec<SummaryRow> {
    plan.per_layer_histogram
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&layer_id, &removed)| {
            let original = plan.original_filters.get(&layer_id).copied().unwrap_or(0);
            SummaryRow {
                layer_id,
                original_filters: original,
                removed,
                removed_pct: if original == 0 {
                    0.0
                } else {
                    100.0 * removed as f64 / original as f64
                },
            }
        })
        .collect()
}
