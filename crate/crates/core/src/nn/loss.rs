//! Training losses over `[B, C]` predictions.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

fn check(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    if a.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: vec![1, 1],
            actual: a.shape().to_vec(),
        });
    }
    Ok(())
}

/// Variance-attenuation (Gaussian negative log-likelihood) loss:
///
/// `(1/B) Σ_i (1/C) Σ_c [2·lnσ_ic + (y_ic − μ_ic)² · exp(−2·lnσ_ic)]`
///
/// Computed from `ln σ` directly so that σ never has to be formed.
pub fn uncert_loss(mu: &Tensor, logsigma: &Tensor, target: &Tensor) -> Result<f64> {
    check(mu, logsigma)?;
    check(mu, target)?;
    if !(mu.all_finite() && logsigma.all_finite() && target.all_finite()) {
        return Err(Error::NonFinite("uncertainty loss inputs"));
    }
    let sum: f64 = mu
        .data()
        .iter()
        .zip(logsigma.data())
        .zip(target.data())
        .map(|((&m, &ls), &y)| {
            let r = y - m;
            2.0 * ls + r * r * (-2.0 * ls).exp()
        })
        .sum();
    Ok(sum / mu.len() as f64)
}

/// Mean of squared residuals over batch and categories.
pub fn mse(mu: &Tensor, target: &Tensor) -> Result<f64> {
    check(mu, target)?;
    if !(mu.all_finite() && target.all_finite()) {
        return Err(Error::NonFinite("squared error inputs"));
    }
    let sum: f64 = mu
        .data()
        .iter()
        .zip(target.data())
        .map(|(&m, &y)| (y - m) * (y - m))
        .sum();
    Ok(sum / mu.len() as f64)
}

/// Root of [`mse`]; the baseline training objective.
pub fn squared_error_loss(mu: &Tensor, target: &Tensor) -> Result<f64> {
    mse(mu, target).map(f64::sqrt)
}
