use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::Model;
use crate::nn::tape::Tape;
use crate::nn::tensor::Tensor;
use crate::synthdata::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// RMSE on μ only; the ln σ head is left untouched.
    SquaredError,
    /// Variance-attenuation loss on (μ, ln σ).
    VarianceAttenuation,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "squared-error" | "rmse" => Ok(LossKind::SquaredError),
            "variance-attenuation" | "uncert" => Ok(LossKind::VarianceAttenuation),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub hflip: bool,
    pub vflip: bool,
    /// With the variance-attenuation loss, hold ln σ at 0 for this many
    /// initial epochs (the loss is then the mean squared error) before
    /// the σ head starts learning.
    pub logsigma_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            loss: LossKind::SquaredError,
            seed: 0,
            hflip: true,
            vflip: true,
            logsigma_warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Learning rate for epoch `epoch` (0-based) under cosine decay to zero.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    base * 0.5 * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean mini-batch loss over the epoch.
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Assemble `[B, C, H, W]` from samples, optionally flipping each image.
pub fn make_batch(samples: &[&Sample], flips: &[(bool, bool)]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (c, h, w) = match first.image.shape() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::ShapeMismatch {
                expected: vec![3, 0, 0],
                actual: other.to_vec(),
            })
        }
    };
    let cats = first.target.len();
    let mut images = Vec::with_capacity(samples.len() * c * h * w);
    let mut targets = Vec::with_capacity(samples.len() * cats);
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != [c, h, w] || s.target.len() != cats {
            return Err(Error::ShapeMismatch {
                expected: vec![c, h, w],
                actual: s.image.shape().to_vec(),
            });
        }
        let (hf, vf) = flips.get(i).copied().unwrap_or((false, false));
        let d = s.image.data();
        for ch in 0..c {
            for y in 0..h {
                let sy = if vf { h - 1 - y } else { y };
                for x in 0..w {
                    let sx = if hf { w - 1 - x } else { x };
                    images.push(d[(ch * h + sy) * w + sx]);
                }
            }
        }
        targets.extend_from_slice(&s.target);
    }
    Ok((
        Tensor::new(vec![samples.len(), c, h, w], images)?,
        Tensor::new(vec![samples.len(), cats], targets)?,
    ))
}

/// Mini-batch SGD with momentum and per-epoch cosine learning-rate decay.
///
/// Velocity update: `v ← m·v + g`, `θ ← θ − η_t·v`.
pub fn train(
    mut model: Model,
    data: &[Sample],
    config: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| vec![0.0; p.value.len()])
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let flips: Vec<(bool, bool)> = samples
                .iter()
                .map(|_| {
                    let h = config.hflip && rng.random::<bool>();
                    let v = config.vflip && rng.random::<bool>();
                    (h, v)
                })
                .collect();
            let (images, targets) = make_batch(&samples, &flips)?;

            let mut tape = Tape::new();
            let pass = model.forward_tape(&mut tape, images)?;
            let loss = match config.loss {
                LossKind::SquaredError => tape.rmse_loss(pass.mu, &targets),
                LossKind::VarianceAttenuation if epoch < config.logsigma_warmup_epochs => {
                    let frozen = tape.leaf(Tensor::zeros(&[samples.len(), model.category_count()]));
                    tape.uncert_loss(pass.mu, frozen, &targets)
                }
                LossKind::VarianceAttenuation => tape.uncert_loss(pass.mu, pass.logsigma, &targets),
            };
            let loss = match loss {
                Ok(id) => id,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: value,
                });
            }
            let grads = tape.backward(loss);
            let m = config.momentum;
            for ((param, vel), id) in model
                .params_mut()
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(&pass.params)
            {
                let Some(g) = grads.get(*id) else { continue };
                let params = param.value.data_mut();
                for (i, &gv) in g.data().iter().enumerate() {
                    vel[i] = m * vel[i] + gv;
                    params[i] -= lr * vel[i];
                }
            }
            loss_sum += value;
            steps += 1;
        }
        let mean = loss_sum / steps as f64;
        log::debug!("epoch {epoch}: lr={lr:.6} loss={mean:.5}");
        history.epochs.push(EpochStats {
            epoch,
            learning_rate: lr,
            loss: mean,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::parse_arch;
    use crate::synthdata::Stratum;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 99, 100) < 0.001);
    }

    #[test]
    fn flips_reverse_axes() {
        let img = Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let s = Sample {
            id: 0,
            image: img,
            target: vec![100.0],
            stratum: Stratum::Easy,
        };
        let (b, _) = make_batch(&[&s], &[(true, false)]).unwrap();
        assert_eq!(b.data(), &[2., 1., 4., 3.]);
        let (b, _) = make_batch(&[&s], &[(false, true)]).unwrap();
        assert_eq!(b.data(), &[3., 4., 1., 2.]);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_training_set_rejected() {
        let arch = parse_arch("input 1x2x2\nflatten\nlinear in=4 out=2\n").unwrap();
        let m = Model::build_from_arch(&arch, 1, 0).unwrap();
        assert!(matches!(
            train(m, &[], &TrainConfig::default()),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let arch = parse_arch("input 1x2x2\nflatten\nlinear in=4 out=2\n").unwrap();
        let m = Model::build_from_arch(&arch, 1, 0).unwrap();
        let data: Vec<Sample> = (0..4)
            .map(|i| Sample {
                id: i,
                image: Tensor::from_fn(&[1, 2, 2], |j| (i + j) as f64 * 1e3),
                target: vec![100.0],
                stratum: Stratum::Easy,
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 10.0,
            batch_size: 2,
            loss: LossKind::VarianceAttenuation,
            ..Default::default()
        };
        assert!(matches!(train(m, &data, &cfg), Err(Error::Diverged { .. })));
    }
}
