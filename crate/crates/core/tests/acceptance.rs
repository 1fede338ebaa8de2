//! Acceptance criteria, one test each. Every test prints a single
//! `PASS` or `FAIL` line before asserting, so the outcome of the whole
//! set can be read from `cargo test --test acceptance -- --nocapture`.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use greenprune::archspec::{builtin, infer_shapes, parse_arch, LayerKind, NetworkArch};
use greenprune::energy::{layer_flops, layer_mem_bytes, network_energy, EnergyConstants};
use greenprune::harness::{self, ExperimentConfig};
use greenprune::hybrid::{hybrid_from_cache, pearson, rmse, threshold_sweep, PredictionCache};
use greenprune::nn::loss::{mse, uncert_loss};
use greenprune::nn::{Model, Tape, Tensor};
use greenprune::pruner::{prune_seeded, PruningConfig};
use greenprune::synthdata::{generate, Stratum, SyntheticConfig, CATEGORY_COUNT};

fn verdict(id: u32, name: &str, ok: bool, detail: String) {
    println!(
        "criterion {id} [{name}]: {} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
}

// ---------------------------------------------------------------------------
// 1. energy oracle

/// Output positions of a sliding window, found by walking the window.
fn windows(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    let mut count = 0;
    let mut start = 0;
    while start + k <= n + 2 * pad {
        count += 1;
        start += stride;
    }
    count
}

struct Oracle {
    flops: u64,
    mem: u64,
}

/// Walk the layers with explicit loops: every multiply-accumulate is
/// counted once, every weight and bias is enumerated.
fn brute_force(arch: &NetworkArch) -> Vec<Oracle> {
    let (mut c, mut h, mut w) = arch.input_shape;
    let mut out = Vec::new();
    for l in &arch.layers {
        let mut flops = 0u64;
        let mut params = 0u64;
        let mut s_out = 0u64;
        match l.kind {
            LayerKind::Conv => {
                let (oh, ow) = (
                    windows(h, l.kernel_omega, l.stride, l.pad),
                    windows(w, l.kernel_omega, l.stride, l.pad),
                );
                for _co in 0..l.c_out {
                    for _y in 0..oh {
                        for _x in 0..ow {
                            for _ci in 0..c {
                                for _ky in 0..l.kernel_omega {
                                    for _kx in 0..l.kernel_omega {
                                        flops += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                for _co in 0..l.c_out {
                    for _ci in 0..c {
                        for _k in 0..l.kernel_omega * l.kernel_omega {
                            params += 1;
                        }
                    }
                    params += 1;
                }
                c = l.c_out;
                h = oh;
                w = ow;
                s_out = (h * w) as u64;
            }
            LayerKind::Linear => {
                let fan_in = c * h * w;
                for _o in 0..l.c_out {
                    for _i in 0..fan_in {
                        flops += 1;
                        params += 1;
                    }
                    params += 1;
                }
                c = l.c_out;
                h = 1;
                w = 1;
                s_out = 1;
            }
            LayerKind::MaxPool | LayerKind::AvgPool => {
                h = windows(h, l.kernel_omega, l.stride, l.pad);
                w = windows(w, l.kernel_omega, l.stride, l.pad);
            }
            LayerKind::Flatten => {
                c *= h * w;
                h = 1;
                w = 1;
            }
            _ => {}
        }
        let mem = if params > 0 {
            (params * 3 + s_out * l.c_out as u64 * 2) * 4
        } else {
            0
        };
        out.push(Oracle { flops, mem });
    }
    out
}

#[test]
fn c1_energy_oracle() {
    let t = Instant::now();
    let constants = EnergyConstants::default();
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for name in ["vgg-tiny", "res-tiny"] {
        let arch = infer_shapes(&builtin(name).unwrap()).unwrap();
        for (l, o) in arch.layers.iter().zip(brute_force(&arch)) {
            let f = layer_flops(l).unwrap();
            let m = layer_mem_bytes(l, &constants).unwrap();
            checked += 1;
            if f != o.flops || m != o.mem {
                mismatches.push(format!(
                    "{name} layer {}: {f}/{m} vs {}/{}",
                    l.id, o.flops, o.mem
                ));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = mismatches.is_empty() && secs < 1.0;
    verdict(
        1,
        "energy oracle",
        ok,
        format!("{checked} layers, {secs:.3} s, {mismatches:?}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 2. sampler fidelity

const THREE_CONV: &str = "input 3x16x16
conv in=3 out=8 k=3 stride=1 pad=1 prunable=true
relu
conv in=8 out=16 k=3 stride=1 pad=1 prunable=true
relu
maxpool k=2 stride=2
conv in=16 out=16 k=5 stride=1 pad=2 prunable=true
relu
";

#[test]
fn c2_sampler_fidelity() {
    let t = Instant::now();
    let arch = parse_arch(THREE_CONV).unwrap();
    let c = EnergyConstants::default();

    // E_k by hand: conv 3→8 on 16×16, conv 8→16 on 16×16, conv 16→16 k=5 on 8×8
    let e = |c_in: f64, c_out: f64, k: f64, s: f64| {
        let flops = c_in * k * k * c_out * s;
        let params = c_in * k * k * c_out + c_out;
        let mem = (params * 3.0 + s * c_out * 2.0) * 4.0;
        flops * c.a_per_flop + mem / 1_048_576.0 * c.b_per_mb
    };
    let energies = [
        e(3., 8., 3., 256.),
        e(8., 16., 3., 256.),
        e(16., 16., 5., 64.),
    ];
    let total: f64 = energies.iter().sum();
    let expected: Vec<f64> = energies.iter().map(|x| x / total).collect();

    let n = 10_000;
    let layer_ids = [0usize, 2, 5];
    let mut counts = [0usize; 3];
    for seed in 0..n {
        let cfg = PruningConfig {
            epsilon: 0.01,
            min_filters: 1,
            seed: seed as u64,
        };
        let (_, plan) = prune_seeded(&arch, &cfg, &c).unwrap();
        let first = plan.removals[0].layer_id;
        counts[layer_ids.iter().position(|&l| l == first).unwrap()] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(&expected)
        .map(|(&o, p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let p_value = ChiSquared::new(2.0).unwrap().sf(stat);
    let secs = t.elapsed().as_secs_f64();
    let ok = p_value > 0.01 && secs < 10.0;
    verdict(
        2,
        "sampler fidelity",
        ok,
        format!(
            "counts {counts:?}, P_k {expected:.4?}, chi2 {stat:.3}, p {p_value:.4}, {secs:.2} s"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 3. pruning contract

#[test]
fn c3_pruning_contract() {
    let t = Instant::now();
    let c = EnergyConstants::default();
    let mut failures = Vec::new();
    let mut plans = 0;
    for name in ["vgg-tiny", "res-tiny"] {
        let arch = infer_shapes(&builtin(name).unwrap()).unwrap();
        let total = arch.prunable_filter_count();
        for epsilon in [0.2, 0.8] {
            for min_filters in [1, 4] {
                for seed in 0..5 {
                    let cfg = PruningConfig {
                        epsilon,
                        min_filters,
                        seed,
                    };
                    let (pruned, plan) = prune_seeded(&arch, &cfg, &c).unwrap();
                    plans += 1;
                    let tag = format!("{name} eps={epsilon} floor={min_filters} seed={seed}");
                    let quota = (epsilon * total as f64).ceil() as usize;
                    if plan.removals.len() != quota {
                        failures.push(format!("{tag}: removed {} != {quota}", plan.removals.len()));
                    }
                    let pruned = infer_shapes(&pruned).unwrap();
                    for l in pruned.layers.iter().filter(|l| l.prunable) {
                        if l.c_out < min_filters {
                            failures.push(format!("{tag}: layer {} has {}", l.id, l.c_out));
                        }
                    }
                    if !plan.energy_trace.windows(2).all(|w| w[1] < w[0]) {
                        failures.push(format!("{tag}: energy not strictly decreasing"));
                    }
                    let (again, plan2) = prune_seeded(&arch, &cfg, &c).unwrap();
                    if plan2 != plan || infer_shapes(&again).unwrap() != pruned {
                        failures.push(format!("{tag}: not reproducible"));
                    }
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = failures.is_empty() && secs < 5.0;
    verdict(
        3,
        "pruning contract",
        ok,
        format!("{plans} plans, {secs:.2} s, {failures:?}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 4. loss correctness

fn small_model() -> (Model, Tensor, Tensor) {
    let arch = parse_arch(
        "input 3x8x8
conv in=3 out=4 k=3 stride=1 pad=1 prunable=true
relu
maxpool k=2 stride=2
conv in=4 out=4 k=3 stride=1 pad=1 prunable=true
relu
avgpool k=4 stride=4
flatten
linear in=4 out=6
relu
",
    )
    .unwrap();
    let model = Model::build_from_arch(&arch, CATEGORY_COUNT, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[4, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    let y = Tensor::from_fn(&[4, CATEGORY_COUNT], |_| rng.random_range(0.0..100.0));
    (model, x, y)
}

#[derive(Clone, Copy)]
enum Which {
    Uncert,
    Rmse,
}

fn plain_loss(model: &Model, x: &Tensor, y: &Tensor, which: Which) -> f64 {
    let (mu, ls) = model.forward(x).unwrap();
    match which {
        Which::Uncert => uncert_loss(&mu, &ls, y).unwrap(),
        Which::Rmse => mse(&mu, y).unwrap().sqrt(),
    }
}

fn worst_gradient_error(which: Which) -> f64 {
    let (mut model, x, y) = small_model();
    let mut tape = Tape::new();
    let pass = model.forward_tape(&mut tape, x.clone()).unwrap();
    let loss = match which {
        Which::Uncert => tape.uncert_loss(pass.mu, pass.logsigma, &y).unwrap(),
        Which::Rmse => tape.rmse_loss(pass.mu, &y).unwrap(),
    };
    let grads = tape.backward(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(match which {
        Which::Uncert => 1,
        Which::Rmse => 2,
    });
    let n_params = model.params().len();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = rng.random_range(0..n_params);
        let i = rng.random_range(0..model.params()[p].value.len());
        let analytic = grads.get(pass.params[p]).map_or(0.0, |g| g.data()[i]);
        let orig = model.params()[p].value.data()[i];
        model.params_mut()[p].value.data_mut()[i] = orig + h;
        let up = plain_loss(&model, &x, &y, which);
        model.params_mut()[p].value.data_mut()[i] = orig - h;
        let down = plain_loss(&model, &x, &y, which);
        model.params_mut()[p].value.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn c4_loss_correctness() {
    let t = Instant::now();
    let one = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
    let zeros = Tensor::zeros(&[2, 3]);
    let target = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let points = [
        uncert_loss(&target, &zeros, &target).unwrap(),
        uncert_loss(&one(0.0), &one(0.0), &one(1.0)).unwrap(),
        uncert_loss(&one(5.0), &one(1.0), &one(5.0)).unwrap(),
    ];
    let points_ok = points == [0.0, 1.0, 2.0];

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mu = Tensor::from_fn(&[16, 3], |_| rng.random_range(-50.0..50.0));
    let y = Tensor::from_fn(&[16, 3], |_| rng.random_range(0.0..100.0));
    let m = mse(&mu, &y).unwrap();
    let frozen_gap = (uncert_loss(&mu, &Tensor::zeros(&[16, 3]), &y).unwrap() - m).abs() / m;
    let frozen_ok = frozen_gap <= 4.0 * f64::EPSILON;

    let g_uncert = worst_gradient_error(Which::Uncert);
    let g_rmse = worst_gradient_error(Which::Rmse);
    let secs = t.elapsed().as_secs_f64();
    let ok = points_ok && frozen_ok && g_uncert < 1e-4 && g_rmse < 1e-4 && secs < 30.0;
    verdict(
        4,
        "loss correctness",
        ok,
        format!(
            "points {points:?}, frozen-σ relative gap {frozen_gap:.2e}, \
             worst gradient rel. error uncert {g_uncert:.2e} rmse {g_rmse:.2e}, {secs:.2} s"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 5. routing identities

#[test]
fn c5_routing_identities() {
    let c = EnergyConstants::default();
    let base = builtin("vgg-tiny").unwrap();
    let (small, _) = prune_seeded(&base, &PruningConfig::new(0.6, 1), &c).unwrap();
    let unpruned = Model::build_from_arch(&base, CATEGORY_COUNT, 1).unwrap();
    let pruned = Model::build_from_arch(&small, CATEGORY_COUNT, 2).unwrap();
    let data = generate(&SyntheticConfig {
        n_samples: 200,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let e_u = network_energy(&base, &c).unwrap().network_total;
    let e_p = network_energy(&small, &c).unwrap().network_total;
    let cache = PredictionCache::build(&pruned, &unpruned, &data.samples, e_p, e_u).unwrap();

    let t = Instant::now();
    let n = cache.len() as f64;
    let targets: Vec<&[f64]> = cache.entries.iter().map(|e| e.target.as_slice()).collect();
    let p_mu: Vec<&[f64]> = cache
        .entries
        .iter()
        .map(|e| e.pruned_mu.as_slice())
        .collect();
    let u_mu: Vec<&[f64]> = cache
        .entries
        .iter()
        .map(|e| e.unpruned_mu.as_slice())
        .collect();
    let pruned_rmse = rmse(&p_mu, &targets).unwrap();
    let unpruned_rmse = rmse(&u_mu, &targets).unwrap();

    let inf = hybrid_from_cache(&cache, f64::INFINITY).unwrap();
    let inf_ok = inf.rmse_overall.to_bits() == pruned_rmse.to_bits()
        && inf.total_energy.to_bits() == (n * e_p).to_bits()
        && inf.reinferred_count == 0;

    let min_sigma = cache.sigmas().into_iter().fold(f64::INFINITY, f64::min);
    let zero = hybrid_from_cache(&cache, min_sigma / 2.0).unwrap();
    let zero_ok = zero.rmse_overall.to_bits() == unpruned_rmse.to_bits()
        && zero.total_energy == n * e_p + n * e_u
        && zero.reinferred_count == cache.len();

    let mut sigmas = cache.sigmas();
    sigmas.sort_by(f64::total_cmp);
    let mut taus = vec![0.0];
    taus.extend(sigmas.iter().step_by(7));
    taus.push(f64::INFINITY);
    taus.dedup();
    let sweep = threshold_sweep(&cache, &taus).unwrap();
    let monotone = sweep
        .rows
        .windows(2)
        .all(|w| w[1].n_reinferred <= w[0].n_reinferred && w[1].energy_j <= w[0].energy_j);
    let secs = t.elapsed().as_secs_f64();
    let ok = inf_ok && zero_ok && monotone && secs < 10.0;
    verdict(
        5,
        "routing identities",
        ok,
        format!(
            "tau=inf exact {inf_ok}, tau=0+ exact {zero_ok}, monotone over {} taus {monotone}, {secs:.3} s",
            taus.len()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 6. desk-scale trend reproduction

const TREND_SEED: u64 = 1;

#[test]
fn c6_trend_reproduction() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        epsilons: vec![80.0],
        sweep_epsilon: 80.0,
        runs: 1,
        seed: TREND_SEED,
        output_dir: dir.path().to_path_buf(),
        tau_quantiles: (1..40).map(|i| i as f64 / 40.0).collect(),
        ..ExperimentConfig::default()
    };
    assert_eq!(cfg.data.n_samples, 2000);
    assert_eq!(cfg.data.hard_fraction, 0.2);
    assert!(cfg.pruned.epochs <= 100 && cfg.baseline.epochs <= 100);
    harness::run_epsilon_sweep(&cfg).unwrap();
    let outcome = harness::run_threshold_sweep(&cfg).unwrap();
    let rows = &outcome.sweep.rows;
    let cache = &outcome.cache;

    let e_ratio = cache.e_pruned / cache.e_unpruned;
    let a = e_ratio <= 0.40;

    let r = pearson(&cache.sigmas(), &cache.pruned_sample_rmse()).unwrap();
    let b = r > 0.3;

    let unpruned_rmse = outcome.references[1].rmse_overall;
    let best = rows
        .iter()
        .filter(|row| row.energy_saving >= 0.35)
        .min_by(|x, y| x.rmse_overall.total_cmp(&y.rmse_overall))
        .unwrap();
    let c = best.rmse_overall <= 1.10 * unpruned_rmse;

    let n_easy = cache
        .entries
        .iter()
        .filter(|e| e.stratum == Stratum::Easy)
        .count() as f64;
    let n_hard = cache
        .entries
        .iter()
        .filter(|e| e.stratum == Stratum::Hard)
        .count() as f64;
    // At tau = 0 and tau = +inf both strata are pinned at rate 1 and 0.
    let partial: Vec<_> = rows
        .iter()
        .filter(|row| row.n_reinferred > 0 && row.n_reinferred < cache.len())
        .collect();
    let d = !partial.is_empty()
        && partial.iter().all(|row| {
            row.n_reinferred_hard as f64 / n_hard > row.n_reinferred_easy as f64 / n_easy
        });

    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "(a) energy ratio {e_ratio:.3} {a}; (b) pearson {r:.3} {b}; \
         (c) best rmse at >=35% saving {:.3} vs unpruned {unpruned_rmse:.3} \
         (ratio {:.3}, saving {:.1}%) {c}; (d) {} partial taus {d}; {:.0} s",
        best.rmse_overall,
        best.rmse_overall / unpruned_rmse,
        100.0 * best.energy_saving,
        partial.len(),
        secs
    );
    let ok = a && b && c && d;
    verdict(6, "trend reproduction", ok, detail);
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 7. determinism

fn csv_files(dir: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.insert(
                    path.strip_prefix(dir)
                        .unwrap()
                        .to_string_lossy()
                        .into_owned(),
                );
            }
        }
    }
    out
}

#[test]
fn c7_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = |dir: &Path| ExperimentConfig {
        epsilons: vec![40.0, 80.0],
        sweep_epsilon: 80.0,
        runs: 2,
        seed: 77,
        output_dir: dir.to_path_buf(),
        min_filters: 2,
        data: SyntheticConfig {
            n_samples: 80,
            ..SyntheticConfig::default()
        },
        baseline: greenprune::nn::TrainConfig {
            epochs: 2,
            ..ExperimentConfig::default().baseline
        },
        pruned: greenprune::nn::TrainConfig {
            epochs: 3,
            logsigma_warmup_epochs: 1,
            ..ExperimentConfig::default().pruned
        },
        ..ExperimentConfig::default()
    };
    for dir in [a.path(), b.path()] {
        harness::run_all(&cfg(dir)).unwrap();
    }
    let files = csv_files(a.path());
    let mut differing = Vec::new();
    for f in &files {
        if std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap() {
            differing.push(f.clone());
        }
    }
    let same_set = files == csv_files(b.path());
    let ok = same_set && differing.is_empty() && files.len() >= 8;
    verdict(
        7,
        "determinism",
        ok,
        format!(
            "{} CSV files compared, differing {differing:?}",
            files.len()
        ),
    );
    assert!(ok);
}
