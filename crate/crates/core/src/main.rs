use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use greenprune::archspec::{load_arch, save_arch};
use greenprune::energy::{network_energy, selection_probs_from_report};
use greenprune::harness::{self, ExperimentConfig};
use greenprune::nn::{checkpoint, train, LossKind, Model};
use greenprune::pruner::{prune_seeded, summarize, PruningConfig};
use greenprune::synthdata::{generate, load_dataset, write_dataset, CATEGORY_COUNT};
use greenprune::{Error, Result};

#[derive(Parser)]
#[command(
    name = "greenprune",
    version,
    about = "Energy-aware pruning at initialization and uncertainty-routed hybrid inference"
)]
struct Cli {
    /// Experiment configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer analytical energy of an architecture.
    AnalyzeEnergy {
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Prune an architecture at initialization.
    Prune {
        #[arg(long)]
        arch: Option<String>,
        /// Fraction of prunable filters to remove, in (0, 1).
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        min_filters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Write a synthetic dataset to a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Train one model on a dataset directory and save a checkpoint.
    Train(TrainArgs),
    /// Run the compression sweep and the threshold sweep.
    Sweep {
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Compression levels in percent, comma separated.
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        #[arg(long)]
        runs: Option<usize>,
        /// Thresholds on aggregated σ, comma separated.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        /// Also write the threshold chart here.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Skip training and only redo the threshold sweep.
        #[arg(long)]
        threshold_only: bool,
    },
    /// Summarise a results directory as markdown.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    data: PathBuf,
    /// `squared-error` or `variance-attenuation`.
    #[arg(long, default_value = "squared-error")]
    loss: LossKind,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn arch_of(
    flag: &Option<String>,
    cfg: &ExperimentConfig,
) -> Result<greenprune::archspec::NetworkArch> {
    load_arch(Path::new(flag.as_deref().unwrap_or(&cfg.arch)))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::AnalyzeEnergy { arch, csv } => {
            let arch = arch_of(&arch, &cfg)?;
            let report = network_energy(&arch, &cfg.energy)?;
            let prunable: BTreeSet<usize> = arch.prunable_layers().into_iter().collect();
            let probs: Vec<(usize, f64)> = if prunable.is_empty() {
                Vec::new()
            } else {
                selection_probs_from_report(&report, &prunable)?
            };
            let p_k = |id: usize| probs.iter().find(|(l, _)| *l == id).map(|(_, p)| *p);
            println!(
                "{:>5} {:<8} {:>12} {:>12} {:>10} {:>12} {:>12} {:>8}",
                "layer",
                "kind",
                "flops",
                "e_flops_j",
                "mem_bytes",
                "e_access_j",
                "e_total_j",
                "p_k"
            );
            for l in &report.per_layer {
                println!(
                    "{:>5} {:<8} {:>12} {:>12.4e} {:>10} {:>12.4e} {:>12.4e} {:>8}",
                    l.layer_id,
                    l.kind.to_string(),
                    l.flops,
                    l.e_flops,
                    l.mem_bytes,
                    l.e_access,
                    l.e_total,
                    p_k(l.layer_id).map_or("-".into(), |p| format!("{p:.4}"))
                );
            }
            println!("total {:.6e} J", report.network_total);
            if let Some(path) = csv {
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record([
                    "layer_id",
                    "kind",
                    "flops",
                    "e_flops_j",
                    "mem_bytes",
                    "e_access_j",
                    "e_total_j",
                    "p_k",
                ])?;
                for l in &report.per_layer {
                    w.write_record([
                        l.layer_id.to_string(),
                        l.kind.to_string(),
                        l.flops.to_string(),
                        l.e_flops.to_string(),
                        l.mem_bytes.to_string(),
                        l.e_access.to_string(),
                        l.e_total.to_string(),
                        p_k(l.layer_id).map_or(String::new(), |p| p.to_string()),
                    ])?;
                }
                w.flush().map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Prune {
            arch,
            epsilon,
            min_filters,
            out,
            plan,
        } => {
            let arch = arch_of(&arch, &cfg)?;
            let pc = PruningConfig {
                epsilon,
                min_filters: min_filters.unwrap_or(cfg.min_filters),
                seed: cfg.seed,
            };
            let (pruned, p) = prune_seeded(&arch, &pc, &cfg.energy)?;
            save_arch(&pruned, &out)?;
            if let Some(path) = plan {
                p.write_csv(&path)?;
            }
            let before = p.energy_trace.first().copied().unwrap_or(f64::NAN);
            let after = p.energy_trace.last().copied().unwrap_or(f64::NAN);
            println!(
                "removed {} filters, energy {before:.4e} J -> {after:.4e} J",
                p.removals.len()
            );
            for row in summarize(&p) {
                println!(
                    "layer {:>3}: {:>3}/{:<3} removed ({:.1}%)",
                    row.layer_id, row.removed, row.original_filters, row.removed_pct
                );
            }
        }
        Command::GenData { out, n_samples } => {
            let mut data = cfg.data.clone();
            data.seed = cfg.seed;
            if let Some(n) = n_samples {
                data.n_samples = n;
            }
            let ds = generate(&data)?;
            write_dataset(&out, &ds)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train(args) => {
            let arch = arch_of(&args.arch, &cfg)?;
            let data = load_dataset(&args.data)?;
            let mut tc = match args.loss {
                LossKind::SquaredError => cfg.baseline.clone(),
                LossKind::VarianceAttenuation => cfg.pruned.clone(),
            };
            tc.seed = cfg.seed;
            if let Some(e) = args.epochs {
                tc.epochs = e;
                tc.logsigma_warmup_epochs = tc.logsigma_warmup_epochs.min(e);
            }
            if let Some(lr) = args.lr {
                tc.learning_rate = lr;
            }
            let model = Model::build_from_arch(&arch, CATEGORY_COUNT, cfg.seed)?;
            let (model, history) = train(model, &data.samples, &tc)?;
            checkpoint::save(&model, &args.out)?;
            if let Some(last) = history.epochs.last() {
                println!("final epoch loss {:.5}", last.loss);
            }
        }
        Command::Sweep {
            output_dir,
            epsilons,
            runs,
            taus,
            svg,
            threshold_only,
        } => {
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(e) = epsilons {
                cfg.epsilons = e;
            }
            if let Some(r) = runs {
                cfg.runs = r;
            }
            if let Some(t) = taus {
                cfg.taus = t;
            }
            if !threshold_only {
                harness::run_epsilon_sweep(&cfg)?;
            }
            let outcome = harness::run_threshold_sweep(&cfg)?;
            if let Some(path) = svg {
                let svg = outcome.sweep.to_svg(
                    Some(outcome.references[0].rmse_overall),
                    Some(outcome.references[1].rmse_overall),
                );
                std::fs::write(&path, svg).map_err(|e| Error::Io { path, source: e })?;
            }
            print!("{}", harness::report(&cfg.output_dir)?);
        }
        Command::Report { dir } => {
            print!("{}", harness::report(&dir.unwrap_or(cfg.output_dir))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
