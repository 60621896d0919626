//! Loss terms for the adversarial model, each returning its value together
//! with the analytic gradient with respect to the predictions it consumes.
//!
//! - [`bce_loss`]: mean binary cross entropy of click predictions.
//! - [`bias_mse_loss`]: mean squared error of the bias network's estimate of `b`.
//! - [`sq_cov_loss`]: squared Bessel-corrected minibatch covariance between
//!   `b` and the bias network's estimate.
//! - [`noisy_loss`]: `(1 − λ)·BCE + λ·Cov²`, the objective of the predictor side.

use crate::error::{Error, Result};

/// Predictions are clamped into this interval before any logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Gradient with respect to the prediction vector, one entry per example.
    pub grad: Vec<f64>,
}

/// Composite loss with separate gradients for the two prediction vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLoss {
    pub value: f64,
    pub bce: f64,
    pub sq_cov: f64,
    pub grad_y_hat: Vec<f64>,
    pub grad_b_hat: Vec<f64>,
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_pair(name: &str, a: &[f64], b: &[f64], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "{name}: length mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < min_len {
        return Err(Error::input(format!(
            "{name}: needs at least {min_len} examples, got {}",
            a.len()
        )));
    }
    Ok(())
}

pub fn bce_loss(y: &[f64], y_hat: &[f64]) -> Result<LossValue> {
    check_pair("bce_loss", y, y_hat, 1)?;
    let n = y.len() as f64;
    let mut value = 0.0;
    let grad = y
        .iter()
        .zip(y_hat)
        .map(|(&t, &p)| {
            let p = clamp_prob(p);
            value -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            (p - t) / (n * p * (1.0 - p))
        })
        .collect();
    Ok(LossValue {
        value: value / n,
        grad,
    })
}

/// Gradient of mean BCE with respect to the pre-sigmoid logits, `(ŷ − y)/n`.
pub fn bce_logit_grad(y: &[f64], y_hat: &[f64]) -> Result<Vec<f64>> {
    check_pair("bce_logit_grad", y, y_hat, 1)?;
    let n = y.len() as f64;
    Ok(y.iter().zip(y_hat).map(|(&t, &p)| (p - t) / n).collect())
}

pub fn bias_mse_loss(b: &[f64], b_hat: &[f64]) -> Result<LossValue> {
    check_pair("bias_mse_loss", b, b_hat, 1)?;
    let n = b.len() as f64;
    let value = b.iter().zip(b_hat).map(|(t, p)| (t - p).powi(2)).sum::<f64>() / n;
    let grad = b.iter().zip(b_hat).map(|(t, p)| 2.0 * (p - t) / n).collect();
    Ok(LossValue { value, grad })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Bessel-corrected sample covariance.
pub fn sample_covariance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("sample_covariance", a, b, 2)?;
    let (ma, mb) = (mean(a), mean(b));
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    Ok(s / (a.len() - 1) as f64)
}

pub fn sq_cov_loss(b: &[f64], b_hat: &[f64]) -> Result<LossValue> {
    check_pair("sq_cov_loss", b, b_hat, 2)?;
    let cov = sample_covariance(b, b_hat)?;
    let b_mean = mean(b);
    let scale = 2.0 * cov / (b.len() - 1) as f64;
    // The mean(b̂) term drops out because Σ(bᵢ − b̄) = 0.
    let grad = b.iter().map(|&t| scale * (t - b_mean)).collect();
    Ok(LossValue {
        value: cov * cov,
        grad,
    })
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

pub fn noisy_loss(
    y: &[f64],
    y_hat: &[f64],
    b: &[f64],
    b_hat: &[f64],
    lambda: f64,
) -> Result<NoisyLoss> {
    check_lambda(lambda)?;
    check_pair("noisy_loss", y, y_hat, 2)?;
    check_pair("noisy_loss", y, b, 2)?;
    check_pair("noisy_loss", b, b_hat, 2)?;
    let bce = bce_loss(y, y_hat)?;
    let cov = sq_cov_loss(b, b_hat)?;
    let value = if lambda == 0.0 {
        bce.value
    } else if lambda == 1.0 {
        cov.value
    } else {
        (1.0 - lambda) * bce.value + lambda * cov.value
    };
    Ok(NoisyLoss {
        value,
        bce: bce.value,
        sq_cov: cov.value,
        grad_y_hat: bce.grad.iter().map(|g| (1.0 - lambda) * g).collect(),
        grad_b_hat: cov.grad.iter().map(|g| lambda * g).collect(),
    })
}
