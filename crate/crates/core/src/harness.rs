//! Experiment orchestration: the ε-sweep, the threshold sweep and the
//! collated report.
//!
//! Everything a run produces is a file under `output_dir`, so an
//! interrupted sweep resumes where it stopped and every summary can be
//! recomputed from the raw per-run CSV.
//!
//! ```text
//! output_dir/
//!   seeds.csv              seed manifest, one row per (setting, run)
//!   raw_runs.csv           one row per completed run, appended as runs finish
//!   epsilon_summary.csv    mean and sample std per setting
//!   plans/eps<E>_run<R>.csv
//!   checkpoints/eps<E>_run<R>.gpck
//!   threshold_sweep.csv    one row per threshold
//!   reference_lines.csv    pruned-only and unpruned-only energy and RMSE
//!   sigma_error.csv        per-sample σ_agg and pruned-model RMSE
//!   operating_points.csv   knee-point heuristic
//!   threshold_sweep.svg    optional chart
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archspec::{load_arch, NetworkArch};
use crate::energy::{network_energy, EnergyConstants};
use crate::error::{Error, Result};
use crate::hybrid::{pearson, quantile_taus, rmse, threshold_sweep, PredictionCache, SweepResult};
use crate::nn::{checkpoint, train, LossKind, Model, TrainConfig};
use crate::pruner::{prune_seeded, PruningConfig};
use crate::synthdata::{
    generate, split, Dataset, Sample, Stratum, SyntheticConfig, CATEGORY_COUNT,
};

pub const RAW_RUNS: &str = "raw_runs.csv";
pub const SEEDS: &str = "seeds.csv";
pub const EPSILON_SUMMARY: &str = "epsilon_summary.csv";
pub const THRESHOLD_SWEEP: &str = "threshold_sweep.csv";
pub const REFERENCE_LINES: &str = "reference_lines.csv";
pub const SIGMA_ERROR: &str = "sigma_error.csv";
pub const OPERATING_POINTS: &str = "operating_points.csv";
pub const SWEEP_SVG: &str = "threshold_sweep.svg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in architecture name or path to an architecture file.
    pub arch: String,
    /// Compression levels in percent, each in (0, 100).
    pub epsilons: Vec<f64>,
    pub runs: usize,
    /// Thresholds for the sweep; empty means quantiles of the observed σ.
    pub taus: Vec<f64>,
    pub tau_quantiles: Vec<f64>,
    /// Which ε (percent) supplies the pruned model for the threshold sweep.
    pub sweep_epsilon: f64,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub train_fraction: f64,
    pub min_filters: usize,
    pub svg: bool,
    pub data: SyntheticConfig,
    pub baseline: TrainConfig,
    pub pruned: TrainConfig,
    pub energy: EnergyConstants,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arch: "vgg-tiny".into(),
            epsilons: vec![20.0, 40.0, 60.0, 80.0, 90.0],
            runs: 5,
            taus: Vec::new(),
            tau_quantiles: (1..10).map(|i| i as f64 / 10.0).collect(),
            sweep_epsilon: 80.0,
            seed: 0,
            output_dir: PathBuf::from("results"),
            train_fraction: 0.75,
            min_filters: 6,
            svg: true,
            data: SyntheticConfig::default(),
            baseline: TrainConfig {
                epochs: 30,
                learning_rate: 0.003,
                loss: LossKind::SquaredError,
                ..TrainConfig::default()
            },
            pruned: TrainConfig {
                epochs: 100,
                learning_rate: 0.0001,
                loss: LossKind::VarianceAttenuation,
                logsigma_warmup_epochs: 60,
                ..TrainConfig::default()
            },
            energy: EnergyConstants::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && **e < 100.0)) {
            return Err(Error::Config(format!("epsilon {e} is not in (0, 100)")));
        }
        if !self.epsilons.contains(&self.sweep_epsilon) {
            return Err(Error::Config(format!(
                "sweep_epsilon {} is not one of the epsilons",
                self.sweep_epsilon
            )));
        }
        if let Some(t) = self.taus.iter().find(|t| t.is_nan() || **t < 0.0) {
            return Err(Error::Config(format!("threshold {t} must be >= 0")));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.baseline.loss != LossKind::SquaredError {
            return Err(Error::Config(
                "the baseline trains with the squared-error loss".into(),
            ));
        }
        if self.pruned.loss != LossKind::VarianceAttenuation {
            return Err(Error::Config(
                "pruned models train with the variance-attenuation loss".into(),
            ));
        }
        self.data.validate()?;
        self.baseline.validate()?;
        self.pruned.validate()?;
        self.energy.validate()
    }

    pub fn load_arch(&self) -> Result<NetworkArch> {
        let arch = load_arch(Path::new(&self.arch))?;
        let (_, h, w) = arch.input_shape;
        if h != self.data.image_size || w != self.data.image_size {
            return Err(Error::Config(format!(
                "architecture expects {h}x{w} inputs but image_size is {}",
                self.data.image_size
            )));
        }
        Ok(arch)
    }

    /// Settings in run order: the baseline (ε = 0) first.
    fn settings(&self) -> Vec<f64> {
        let mut s = vec![0.0];
        s.extend(self.epsilons.iter().copied());
        s
    }
}

/// SplitMix64 finaliser, used to derive independent seeds from the master.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub prune: u64,
    pub init: u64,
    pub train: u64,
}

pub fn run_seeds(master: u64, setting: usize, run: usize) -> RunSeeds {
    let base = mix(mix(master ^ 0x5eed) ^ ((setting as u64) << 32 | run as u64));
    RunSeeds {
        prune: mix(base ^ 1),
        init: mix(base ^ 2),
        train: mix(base ^ 3),
    }
}

fn eps_tag(eps: f64) -> String {
    format!("{eps}").replace('.', "p")
}

pub fn checkpoint_path(dir: &Path, eps: f64, run: usize) -> PathBuf {
    dir.join("checkpoints")
        .join(format!("eps{}_run{run}.gpck", eps_tag(eps)))
}

fn plan_path(dir: &Path, eps: f64, run: usize) -> PathBuf {
    dir.join("plans")
        .join(format!("eps{}_run{run}.csv", eps_tag(eps)))
}

/// Dataset and split shared by every run of an experiment.
pub fn experiment_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let data_cfg = SyntheticConfig {
        seed: mix(config.seed ^ 0xda7a),
        ..config.data.clone()
    };
    let ds = generate(&data_cfg)?;
    split(&ds, config.train_fraction, mix(config.seed ^ 0x5911))
}

/// One completed run of the ε-sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epsilon_pct: f64,
    pub run: usize,
    pub energy_j: f64,
    pub params: usize,
    pub rmse_easy: f64,
    pub rmse_hard: f64,
    pub rmse_overall: f64,
    pub final_loss: f64,
}

fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

fn evaluate(model: &Model, test: &[Sample]) -> Result<(f64, f64, f64)> {
    let images: Vec<_> = test.iter().map(|s| &s.image).collect();
    let (mu, _) = model.forward(&crate::nn::Tensor::stack(&images)?)?;
    let preds: Vec<&[f64]> = (0..test.len()).map(|i| mu.row(i)).collect();
    let by = |st: Stratum| {
        let (p, t): (Vec<&[f64]>, Vec<&[f64]>) = preds
            .iter()
            .zip(test)
            .filter(|(_, s)| s.stratum == st)
            .map(|(p, s)| (*p, s.target.as_slice()))
            .unzip();
        if p.is_empty() {
            Ok(f64::NAN)
        } else {
            rmse(&p, &t)
        }
    };
    let targets: Vec<&[f64]> = test.iter().map(|s| s.target.as_slice()).collect();
    Ok((
        by(Stratum::Easy)?,
        by(Stratum::Hard)?,
        rmse(&preds, &targets)?,
    ))
}

fn build_run_arch(
    config: &ExperimentConfig,
    arch: &NetworkArch,
    eps: f64,
    seeds: RunSeeds,
    dir: &Path,
    run: usize,
) -> Result<NetworkArch> {
    if eps == 0.0 {
        return Ok(arch.clone());
    }
    let cfg = PruningConfig {
        epsilon: eps / 100.0,
        min_filters: config.min_filters,
        seed: seeds.prune,
    };
    let (pruned, plan) = prune_seeded(arch, &cfg, &config.energy)?;
    let path = plan_path(dir, eps, run);
    fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&path, e))?;
    plan.write_csv(&path)?;
    Ok(pruned)
}

fn write_seed_manifest(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let path = dir.join(SEEDS);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "epsilon_pct",
        "run",
        "prune_seed",
        "init_seed",
        "train_seed",
    ])?;
    for (si, eps) in config.settings().into_iter().enumerate() {
        for run in 0..config.runs {
            let s = run_seeds(config.seed, si, run);
            w.write_record([
                eps.to_string(),
                run.to_string(),
                s.prune.to_string(),
                s.init.to_string(),
                s.train.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Train the baseline and every pruned setting `runs` times, appending
/// each finished run to `raw_runs.csv`. Runs already present in that file
/// are skipped, so an interrupted sweep can simply be restarted.
pub fn run_epsilon_sweep(config: &ExperimentConfig) -> Result<Vec<SummaryRow>> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
    write_seed_manifest(config, dir)?;
    let arch = config.load_arch()?;
    let (train_set, test_set) = experiment_data(config)?;
    log::info!(
        "data: {} train, {} test ({} hard)",
        train_set.len(),
        test_set.len(),
        test_set.count(Stratum::Hard)
    );

    let raw = dir.join(RAW_RUNS);
    let done = read_runs(&raw)?;
    let exists = raw.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&raw)
        .map_err(|e| Error::io(&raw, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(!exists)
        .from_writer(file);

    for (si, eps) in config.settings().into_iter().enumerate() {
        for run in 0..config.runs {
            if done.iter().any(|r| r.epsilon_pct == eps && r.run == run)
                && checkpoint_path(dir, eps, run).exists()
            {
                log::info!("eps={eps} run={run}: already done");
                continue;
            }
            let seeds = run_seeds(config.seed, si, run);
            let run_arch = build_run_arch(config, &arch, eps, seeds, dir, run)?;
            let energy = network_energy(&run_arch, &config.energy)?.network_total;
            let train_cfg = TrainConfig {
                seed: seeds.train,
                ..if eps == 0.0 {
                    config.baseline.clone()
                } else {
                    config.pruned.clone()
                }
            };
            let model = Model::build_from_arch(&run_arch, CATEGORY_COUNT, seeds.init)?;
            let (model, history) = train(model, &train_set.samples, &train_cfg)?;
            checkpoint::save(&model, &checkpoint_path(dir, eps, run))?;
            let (rmse_easy, rmse_hard, rmse_overall) = evaluate(&model, &test_set.samples)?;
            let rec = RunRecord {
                epsilon_pct: eps,
                run,
                energy_j: energy,
                params: model.param_count(),
                rmse_easy,
                rmse_hard,
                rmse_overall,
                final_loss: history.epochs.last().map_or(f64::NAN, |e| e.loss),
            };
            log::info!(
                "eps={eps} run={run}: energy={energy:.4e} J rmse easy={rmse_easy:.3} hard={rmse_hard:.3}"
            );
            w.serialize(&rec)?;
            w.flush().map_err(|e| Error::io(&raw, e))?;
        }
    }
    drop(w);
    let summary = summarize_runs(&read_runs(&raw)?, config.runs)?;
    write_summary(&dir.join(EPSILON_SUMMARY), &summary)?;
    Ok(summary)
}

/// Mean and sample standard deviation (n − 1) of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Stat { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub epsilon_pct: f64,
    pub runs: usize,
    pub energy_j: Stat,
    pub rmse_easy: Stat,
    pub rmse_hard: Stat,
    pub rmse_overall: Stat,
}

/// Collapse raw runs to one row per setting, ordered by ε. Each setting
/// must have exactly `runs` rows.
pub fn summarize_runs(records: &[RunRecord], runs: usize) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<u64, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.epsilon_pct.to_bits()).or_default().push(r);
    }
    let mut rows = groups
        .into_values()
        .map(|g| {
            if g.len() != runs {
                return Err(Error::Dataset(format!(
                    "epsilon {} has {} runs, expected {runs}",
                    g[0].epsilon_pct,
                    g.len()
                )));
            }
            let col =
                |f: fn(&RunRecord) -> f64| mean_std(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            Ok(SummaryRow {
                epsilon_pct: g[0].epsilon_pct,
                runs: g.len(),
                energy_j: col(|r| r.energy_j),
                rmse_easy: col(|r| r.rmse_easy),
                rmse_hard: col(|r| r.rmse_hard),
                rmse_overall: col(|r| r.rmse_overall),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.epsilon_pct.total_cmp(&b.epsilon_pct));
    Ok(rows)
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epsilon_pct",
        "runs",
        "energy_j_mean",
        "energy_j_std",
        "rmse_easy_mean",
        "rmse_easy_std",
        "rmse_hard_mean",
        "rmse_hard_std",
        "rmse_overall_mean",
        "rmse_overall_std",
    ])?;
    for r in rows {
        let mut rec = vec![r.epsilon_pct.to_string(), r.runs.to_string()];
        for s in [r.energy_j, r.rmse_easy, r.rmse_hard, r.rmse_overall] {
            rec.push(s.mean.to_string());
            rec.push(s.std.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub model: String,
    pub energy_j: f64,
    pub rmse_overall: f64,
    pub rmse_easy: f64,
    pub rmse_hard: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdOutcome {
    pub sweep: SweepResult,
    pub references: Vec<ReferenceLine>,
    pub cache: PredictionCache,
    /// Correlation between σ_agg and the pruned model's per-sample RMSE.
    pub sigma_error_pearson: f64,
}

/// Route the test set between the run-0 pruned model at `sweep_epsilon`
/// and the run-0 baseline, for every threshold. The `0` and `+∞` anchors
/// are always included.
pub fn run_threshold_sweep(config: &ExperimentConfig) -> Result<ThresholdOutcome> {
    config.validate()?;
    let dir = &config.output_dir;
    let load = |eps: f64| {
        let path = checkpoint_path(dir, eps, 0);
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "missing {}; run the epsilon sweep first",
                path.display()
            )));
        }
        checkpoint::load(&path)
    };
    let unpruned = load(0.0)?;
    let pruned = load(config.sweep_epsilon)?;
    let e_u = network_energy(unpruned.arch(), &config.energy)?.network_total;
    let e_p = network_energy(pruned.arch(), &config.energy)?.network_total;
    let (_, test_set) = experiment_data(config)?;
    let cache = PredictionCache::build(&pruned, &unpruned, &test_set.samples, e_p, e_u)?;

    let mut taus = if config.taus.is_empty() {
        quantile_taus(&cache, &config.tau_quantiles)
    } else {
        config.taus.clone()
    };
    taus.extend([0.0, f64::INFINITY]);
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let sweep = threshold_sweep(&cache, &taus)?;

    let ends = |row: &crate::hybrid::SweepRow, name: &str| ReferenceLine {
        model: name.into(),
        energy_j: row.energy_j,
        rmse_overall: row.rmse_overall,
        rmse_easy: row.rmse_easy.unwrap_or(f64::NAN),
        rmse_hard: row.rmse_hard.unwrap_or(f64::NAN),
    };
    let last = sweep.rows.last().expect("non-empty");
    let first = &sweep.rows[0];
    let references = vec![
        ends(last, "pruned-only"),
        ReferenceLine {
            // Unpruned alone costs N·e_u; the tau = 0 row also pays for the
            // pruned pass.
            energy_j: sweep.unpruned_energy_j,
            ..ends(first, "unpruned-only")
        },
    ];

    let sigma_error_pearson = pearson(&cache.sigmas(), &cache.pruned_sample_rmse())?;

    sweep.write_csv(&dir.join(THRESHOLD_SWEEP))?;
    let mut w = csv::Writer::from_path(dir.join(REFERENCE_LINES))?;
    for r in &references {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(|e| Error::io(dir.join(REFERENCE_LINES), e))?;
    write_sigma_error(&dir.join(SIGMA_ERROR), &cache)?;
    write_operating_points(&dir.join(OPERATING_POINTS), &sweep)?;
    if config.svg {
        let svg = sweep.to_svg(
            Some(references[0].rmse_overall),
            Some(references[1].rmse_overall),
        );
        let path = dir.join(SWEEP_SVG);
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ThresholdOutcome {
        sweep,
        references,
        cache,
        sigma_error_pearson,
    })
}

fn write_sigma_error(path: &Path, cache: &PredictionCache) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "stratum", "sigma_agg", "pruned_rmse"])?;
    for (e, err) in cache.entries.iter().zip(cache.pruned_sample_rmse()) {
        w.write_record([
            e.id.to_string(),
            e.stratum.to_string(),
            e.sigma_agg.to_string(),
            err.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_operating_points(path: &Path, sweep: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rule", "tau", "energy_saving_pct", "rmse_overall"])?;
    if let Some(k) = sweep.knee_point() {
        w.write_record([
            "knee (heuristic)".to_string(),
            k.tau.to_string(),
            (100.0 * k.energy_saving).to_string(),
            k.rmse_overall.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Run the ε-sweep and then the threshold sweep.
pub fn run_all(config: &ExperimentConfig) -> Result<(Vec<SummaryRow>, ThresholdOutcome)> {
    let summary = run_epsilon_sweep(config)?;
    let outcome = run_threshold_sweep(config)?;
    Ok((summary, outcome))
}

type Table = (Vec<String>, Vec<Vec<String>>);

fn read_table(path: &Path) -> Result<Option<Table>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok(Some((header, rows)))
}

fn markdown_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

fn short(v: &str) -> String {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() && x != 0.0 && (x.abs() < 1e-3 || x.abs() >= 1e6) => {
            format!("{x:.4e}")
        }
        Ok(x) if x.is_finite() && x.fract() != 0.0 => format!("{x:.4}"),
        _ => v.to_string(),
    }
}

/// Markdown summary of whatever results exist in `dir`. The ε table is
/// recomputed from `raw_runs.csv`.
pub fn report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let raw = read_runs(&dir.join(RAW_RUNS))?;
    if !raw.is_empty() {
        let mut per: BTreeMap<u64, usize> = BTreeMap::new();
        for r in &raw {
            *per.entry(r.epsilon_pct.to_bits()).or_default() += 1;
        }
        let runs = per.values().copied().min().unwrap_or(0);
        let complete: Vec<RunRecord> = raw
            .iter()
            .filter(|r| per[&r.epsilon_pct.to_bits()] == runs)
            .cloned()
            .collect();
        let rows = summarize_runs(&complete, runs)?;
        out.push_str("## Compression sweep (mean ± std over runs)\n\n");
        let header: Vec<String> = [
            "ε %",
            "runs",
            "energy J",
            "RMSE easy",
            "RMSE hard",
            "RMSE overall",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let pm = |s: Stat| {
            format!(
                "{} ± {}",
                short(&s.mean.to_string()),
                short(&s.std.to_string())
            )
        };
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.epsilon_pct.to_string(),
                    r.runs.to_string(),
                    short(&r.energy_j.mean.to_string()),
                    pm(r.rmse_easy),
                    pm(r.rmse_hard),
                    pm(r.rmse_overall),
                ]
            })
            .collect();
        markdown_table(&mut out, &header, &body);
    }
    for (title, file) in [
        ("Threshold sweep", THRESHOLD_SWEEP),
        ("Reference lines", REFERENCE_LINES),
        ("Operating point", OPERATING_POINTS),
    ] {
        if let Some((header, rows)) = read_table(&dir.join(file))? {
            let _ = writeln!(out, "## {title}\n");
            let rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| r.iter().map(|v| short(v)).collect())
                .collect();
            markdown_table(&mut out, &header, &rows);
        }
    }
    if let Some((_, rows)) = read_table(&dir.join(SIGMA_ERROR))? {
        let parse =
            |i: usize| -> Vec<f64> { rows.iter().filter_map(|r| r[i].parse().ok()).collect() };
        if let Ok(r) = pearson(&parse(2), &parse(3)) {
            let _ = writeln!(
                out,
                "Pearson correlation of aggregated σ with per-sample pruned RMSE: {r:.4} (n = {})\n",
                rows.len()
            );
        }
    }
    if out.is_empty() {
        return Ok(format!("no results in {}\n", dir.display()));
    }
    Ok(format!("# Results: {}\n\n{out}", dir.display()))
}
