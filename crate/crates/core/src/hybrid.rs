//! σ-thresholded routing between a cheap pruned model and the unpruned one.
//!
//! Every sample is first inferred by the pruned model. When its aggregated
//! spread `σ_agg = Σ_c σ_c` exceeds `tau` the sample is re-inferred by the
//! unpruned model and that point prediction replaces the pruned one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GaussianPrediction, Model};
use crate::synthdata::{Sample, Stratum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// `+∞` keeps every pruned prediction, `0` re-infers everything.
    pub tau: f64,
}

impl HybridConfig {
    pub fn new(tau: f64) -> Result<Self> {
        validate_tau(tau)?;
        Ok(HybridConfig { tau })
    }
}

fn validate_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Hybrid(format!(
            "tau must be >= 0 or +inf, got {tau}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Keep,
    Reinfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Pruned,
    Unpruned,
}

pub fn aggregate_sigma(pred: &GaussianPrediction) -> f64 {
    pred.sigma.iter().sum()
}

/// Strict comparison: a sample sitting exactly on the threshold is kept.
pub fn route(sigma_agg: f64, tau: f64) -> Route {
    if sigma_agg > tau {
        Route::Reinfer
    } else {
        Route::Keep
    }
}

/// Both models' outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedPrediction {
    pub id: usize,
    pub stratum: Stratum,
    pub target: Vec<f64>,
    pub sigma_agg: f64,
    pub pruned_mu: Vec<f64>,
    pub unpruned_mu: Vec<f64>,
}

/// Per-sample predictions of both models, computed once and reused for
/// every threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionCache {
    pub entries: Vec<CachedPrediction>,
    /// Joules per sample.
    pub e_pruned: f64,
    pub e_unpruned: f64,
}

impl PredictionCache {
    pub fn build(
        pruned: &Model,
        unpruned: &Model,
        data: &[Sample],
        e_pruned: f64,
        e_unpruned: f64,
    ) -> Result<Self> {
        if pruned.category_count() != unpruned.category_count() {
            return Err(Error::Hybrid(format!(
                "category count mismatch: pruned {} vs unpruned {}",
                pruned.category_count(),
                unpruned.category_count()
            )));
        }
        if !(e_pruned >= 0.0 && e_unpruned >= 0.0 && e_pruned.is_finite() && e_unpruned.is_finite())
        {
            return Err(Error::Hybrid(
                "per-sample energies must be finite and >= 0".into(),
            ));
        }
        let mut entries = Vec::with_capacity(data.len());
        if data.is_empty() {
            return Ok(PredictionCache {
                entries,
                e_pruned,
                e_unpruned,
            });
        }
        let images: Vec<_> = data.iter().map(|s| &s.image).collect();
        let batch = crate::nn::Tensor::stack(&images)?;
        let p = pruned.predict_gaussian(&batch)?;
        let (u_mu, _) = unpruned.forward(&batch)?;
        for (i, (s, p)) in data.iter().zip(p).enumerate() {
            if s.target.len() != pruned.category_count() {
                return Err(Error::ShapeMismatch {
                    expected: vec![pruned.category_count()],
                    actual: vec![s.target.len()],
                });
            }
            entries.push(CachedPrediction {
                id: s.id,
                stratum: s.stratum,
                target: s.target.clone(),
                sigma_agg: aggregate_sigma(&p),
                pruned_mu: p.mu,
                unpruned_mu: u_mu.row(i).to_vec(),
            });
        }
        Ok(PredictionCache {
            entries,
            e_pruned,
            e_unpruned,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.sigma_agg).collect()
    }

    /// Per-sample RMSE of the pruned model over categories.
    pub fn pruned_sample_rmse(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| sample_rmse(&e.pruned_mu, &e.target))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutedSample {
    pub id: usize,
    pub stratum: Stratum,
    pub source: Source,
    pub prediction: Vec<f64>,
    pub sigma_agg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HybridResult {
    pub tau: f64,
    pub per_sample: Vec<RoutedSample>,
    pub reinferred_count: usize,
    pub reinferred_by_stratum: BTreeMap<Stratum, usize>,
    /// Joules over the whole batch.
    pub total_energy: f64,
    pub rmse_overall: f64,
    /// `None` for a stratum with no samples.
    pub rmse_by_stratum: BTreeMap<Stratum, Option<f64>>,
}

/// Apply threshold `tau` to cached predictions.
pub fn hybrid_from_cache(cache: &PredictionCache, tau: f64) -> Result<HybridResult> {
    validate_tau(tau)?;
    if cache.is_empty() {
        return Err(Error::Hybrid("no samples to route".into()));
    }
    let per_sample: Vec<RoutedSample> = cache
        .entries
        .iter()
        .map(|e| {
            let (source, prediction) = match route(e.sigma_agg, tau) {
                Route::Keep => (Source::Pruned, e.pruned_mu.clone()),
                Route::Reinfer => (Source::Unpruned, e.unpruned_mu.clone()),
            };
            RoutedSample {
                id: e.id,
                stratum: e.stratum,
                source,
                prediction,
                sigma_agg: e.sigma_agg,
            }
        })
        .collect();

    let mut reinferred_by_stratum = BTreeMap::new();
    let mut rmse_by_stratum = BTreeMap::new();
    for stratum in Stratum::ALL {
        let n = per_sample
            .iter()
            .filter(|s| s.stratum == stratum && s.source == Source::Unpruned)
            .count();
        reinferred_by_stratum.insert(stratum, n);
        let (preds, targets): (Vec<&[f64]>, Vec<&[f64]>) = per_sample
            .iter()
            .zip(&cache.entries)
            .filter(|(s, _)| s.stratum == stratum)
            .map(|(s, e)| (s.prediction.as_slice(), e.target.as_slice()))
            .unzip();
        let r = if preds.is_empty() {
            None
        } else {
            Some(rmse(&preds, &targets)?)
        };
        rmse_by_stratum.insert(stratum, r);
    }
    let reinferred_count = reinferred_by_stratum.values().sum();
    let preds: Vec<&[f64]> = per_sample.iter().map(|s| s.prediction.as_slice()).collect();
    let targets: Vec<&[f64]> = cache.entries.iter().map(|e| e.target.as_slice()).collect();
    Ok(HybridResult {
        tau,
        rmse_overall: rmse(&preds, &targets)?,
        total_energy: cache.len() as f64 * cache.e_pruned
            + reinferred_count as f64 * cache.e_unpruned,
        per_sample,
        reinferred_count,
        reinferred_by_stratum,
        rmse_by_stratum,
    })
}

/// Route `data` through `pruned` first and re-infer with `unpruned` where
/// the aggregated σ exceeds `tau`.
pub fn hybrid_predict(
    pruned: &Model,
    unpruned: &Model,
    data: &[Sample],
    tau: f64,
    e_pruned: f64,
    e_unpruned: f64,
) -> Result<HybridResult> {
    let cache = PredictionCache::build(pruned, unpruned, data, e_pruned, e_unpruned)?;
    hybrid_from_cache(&cache, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub n_reinferred: usize,
    pub n_reinferred_easy: usize,
    pub n_reinferred_hard: usize,
    pub energy_j: f64,
    /// Fraction of the unpruned-only energy saved, in `[.., 1]`.
    pub energy_saving: f64,
    pub rmse_overall: f64,
    pub rmse_easy: Option<f64>,
    pub rmse_hard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Unpruned-only energy for the same samples, `N·e_unpruned`.
    pub unpruned_energy_j: f64,
}

impl SweepRow {
    fn from_result(r: &HybridResult, unpruned_energy: f64) -> Self {
        SweepRow {
            tau: r.tau,
            n_reinferred: r.reinferred_count,
            n_reinferred_easy: r.reinferred_by_stratum[&Stratum::Easy],
            n_reinferred_hard: r.reinferred_by_stratum[&Stratum::Hard],
            energy_j: r.total_energy,
            energy_saving: 1.0 - r.total_energy / unpruned_energy,
            rmse_overall: r.rmse_overall,
            rmse_easy: r.rmse_by_stratum[&Stratum::Easy],
            rmse_hard: r.rmse_by_stratum[&Stratum::Hard],
        }
    }
}

/// One row per threshold, all from the same cached predictions.
pub fn threshold_sweep(cache: &PredictionCache, taus: &[f64]) -> Result<SweepResult> {
    if taus.is_empty() {
        return Err(Error::Hybrid("threshold list is empty".into()));
    }
    for t in taus {
        validate_tau(*t)?;
    }
    if taus.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Hybrid("thresholds must be sorted ascending".into()));
    }
    let unpruned_energy = cache.len() as f64 * cache.e_unpruned;
    let rows = taus
        .iter()
        .map(|&tau| {
            Ok(SweepRow::from_result(
                &hybrid_from_cache(cache, tau)?,
                unpruned_energy,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        rows,
        unpruned_energy_j: unpruned_energy,
    })
}

/// Thresholds at the given quantiles of the cached σ population, plus the
/// `0` and `+∞` anchors, ascending and deduplicated.
pub fn quantile_taus(cache: &PredictionCache, quantiles: &[f64]) -> Vec<f64> {
    let mut sigmas = cache.sigmas();
    sigmas.sort_by(f64::total_cmp);
    let mut taus = vec![0.0];
    if !sigmas.is_empty() {
        for &q in quantiles {
            let pos = (q.clamp(0.0, 1.0) * (sigmas.len() - 1) as f64).round() as usize;
            taus.push(sigmas[pos]);
        }
    }
    taus.push(f64::INFINITY);
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    taus
}

fn format_tau(tau: f64) -> String {
    if tau.is_infinite() {
        "inf".to_string()
    } else {
        format!("{tau}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl SweepResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "tau",
            "n_reinferred",
            "n_reinferred_easy",
            "n_reinferred_hard",
            "energy_j",
            "energy_saving_pct",
            "rmse_overall",
            "rmse_easy",
            "rmse_hard",
        ])?;
        for r in &self.rows {
            w.write_record([
                format_tau(r.tau),
                r.n_reinferred.to_string(),
                r.n_reinferred_easy.to_string(),
                r.n_reinferred_hard.to_string(),
                r.energy_j.to_string(),
                (100.0 * r.energy_saving).to_string(),
                r.rmse_overall.to_string(),
                opt(r.rmse_easy),
                opt(r.rmse_hard),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Our own pick of an "operating point": the row farthest from the
    /// straight line joining the first and last rows in the normalised
    /// (energy saving, RMSE) plane. A heuristic, not a selection rule.
    pub fn knee_point(&self) -> Option<&SweepRow> {
        let (first, last) = (self.rows.first()?, self.rows.last()?);
        let span_x = last.energy_saving - first.energy_saving;
        let span_y = last.rmse_overall - first.rmse_overall;
        if span_x == 0.0 || span_y == 0.0 {
            return None;
        }
        let norm = |r: &SweepRow| {
            (
                (r.energy_saving - first.energy_saving) / span_x,
                (r.rmse_overall - first.rmse_overall) / span_y,
            )
        };
        self.rows
            .iter()
            .map(|r| {
                let (x, y) = norm(r);
                (r, (x - y).abs())
            })
            .filter(|(_, d)| *d > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(r, _)| r)
    }

    /// Row with the largest energy saving whose RMSE stays within
    /// `(1 + tolerance)·reference`.
    pub fn best_within(&self, reference_rmse: f64, tolerance: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.rmse_overall <= (1.0 + tolerance) * reference_rmse)
            .max_by(|a, b| a.energy_saving.total_cmp(&b.energy_saving))
    }

    /// Dual-axis line chart: energy saving (left axis) and RMSE (right axis)
    /// against threshold. Rows are spaced evenly along x; ticks show tau.
    pub fn to_svg(&self, pruned_rmse: Option<f64>, unpruned_rmse: Option<f64>) -> String {
        const W: f64 = 640.0;
        const H: f64 = 360.0;
        const L: f64 = 60.0;
        const R: f64 = 60.0;
        const T: f64 = 30.0;
        const B: f64 = 50.0;
        let n = self.rows.len().max(2);
        let x = |i: usize| L + (W - L - R) * i as f64 / (n - 1) as f64;
        let mut rmse_vals: Vec<f64> = self.rows.iter().map(|r| r.rmse_overall).collect();
        rmse_vals.extend(pruned_rmse);
        rmse_vals.extend(unpruned_rmse);
        let lo = rmse_vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = rmse_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, hi + 1.0)
        };
        let y_rmse = |v: f64| T + (H - T - B) * (1.0 - (v - lo) / (hi - lo));
        let y_save = |v: f64| T + (H - T - B) * (1.0 - v.clamp(0.0, 1.0));

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<rect x="{L}" y="{T}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            W - L - R,
            H - T - B
        );
        let line = |pts: Vec<(f64, f64)>, colour: &str| {
            let p: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
            format!(
                r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
                p.join(" ")
            )
        };
        let save_pts = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (x(i), y_save(r.energy_saving)))
            .collect();
        let rmse_pts = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (x(i), y_rmse(r.rmse_overall)))
            .collect();
        let _ = writeln!(s, "{}", line(save_pts, "#2a7f2a"));
        let _ = writeln!(s, "{}", line(rmse_pts, "#b03030"));
        for (v, label, dash) in [
            (pruned_rmse, "pruned only", "6,3"),
            (unpruned_rmse, "unpruned only", "2,3"),
        ] {
            if let Some(v) = v {
                let y = y_rmse(v);
                let _ = writeln!(
                    s,
                    r##"<line x1="{L}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="#b03030" stroke-dasharray="{dash}"/><text x="{}" y="{:.2}" fill="#b03030">{label}</text>"##,
                    W - R,
                    L + 4.0,
                    y - 3.0
                );
            }
        }
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                x(i),
                H - B + 14.0,
                if r.tau.is_infinite() {
                    "inf".to_string()
                } else {
                    format!("{:.3}", r.tau)
                }
            );
        }
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{:.2}" text-anchor="end" fill="#2a7f2a">{:.0}%</text>"##,
                L - 4.0,
                y_save(f) + 4.0,
                100.0 * f
            );
            let v = lo + f * (hi - lo);
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{:.2}" fill="#b03030">{v:.2}</text>"##,
                W - R + 4.0,
                y_rmse(v) + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">threshold on aggregated sigma</text>"#,
            W / 2.0,
            H - 12.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{L}" y="18" fill="#2a7f2a">energy saving</text>"##
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="18" text-anchor="end" fill="#b03030">RMSE</text>"##,
            W - R
        );
        s.push_str("</svg>\n");
        s
    }
}

fn sample_rmse(pred: &[f64], target: &[f64]) -> f64 {
    let ss: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    (ss / pred.len() as f64).sqrt()
}

/// Root of the mean squared residual over samples and categories.
pub fn rmse<P: AsRef<[f64]>, T: AsRef<[f64]>>(predictions: &[P], targets: &[T]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![targets.len()],
            actual: vec![predictions.len()],
        });
    }
    let mut ss = 0.0;
    let mut n = 0usize;
    for (p, t) in predictions.iter().zip(targets) {
        let (p, t) = (p.as_ref(), t.as_ref());
        if p.len() != t.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![t.len()],
                actual: vec![p.len()],
            });
        }
        ss += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        n += p.len();
    }
    if n == 0 {
        return Err(Error::Hybrid("rmse of no values".into()));
    }
    Ok((ss / n as f64).sqrt())
}

/// RMSE restricted to samples of one stratum; `None` if it has no samples.
pub fn rmse_for_stratum<P: AsRef<[f64]>>(
    predictions: &[P],
    data: &[Sample],
    stratum: Stratum,
) -> Result<Option<f64>> {
    if predictions.len() != data.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![data.len()],
            actual: vec![predictions.len()],
        });
    }
    let (p, t): (Vec<&[f64]>, Vec<&[f64]>) = predictions
        .iter()
        .zip(data)
        .filter(|(_, s)| s.stratum == stratum)
        .map(|(p, s)| (p.as_ref(), s.target.as_slice()))
        .unzip();
    if p.is_empty() {
        return Ok(None);
    }
    rmse(&p, &t).map(Some)
}

/// Product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![xs.len()],
            actual: vec![ys.len()],
        });
    }
    if xs.len() < 2 {
        return Err(Error::Hybrid(
            "correlation needs at least two points".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Hybrid(
            "correlation undefined for zero variance".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
