use std::f64::consts::{E, PI};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
/// Added inside the log of the tanh Jacobian.
pub const SQUASH_EPS: f64 = 1e-6;

/// Diagonal Gaussian with log standard deviations clamped to
/// `[LOG_STD_MIN, LOG_STD_MAX]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::dim("gaussian log_std", mean.len(), log_std.len()));
        }
        let log_std = log_std
            .into_iter()
            .map(|l| {
                if l.is_nan() {
                    l
                } else {
                    l.clamp(LOG_STD_MIN, LOG_STD_MAX)
                }
            })
            .collect();
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dim("gaussian argument", self.dim(), x.len()));
        }
        Ok(())
    }

    /// Reparameterized sample `mean + exp(log_std) ⊙ noise`.
    pub fn rsample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        self.check(noise)?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(noise)
            .map(|((m, l), e)| m + l.exp() * e)
            .collect())
    }

    /// ∂ rsample / ∂ log_std, elementwise.
    pub fn rsample_log_std_grad(&self, noise: &[f64]) -> Result<Vec<f64>> {
        self.check(noise)?;
        Ok(self
            .log_std
            .iter()
            .zip(noise)
            .map(|(l, e)| l.exp() * e)
            .collect())
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(x)
            .map(|((&m, &l), &x)| log_prob_1d(x, m, l))
            .sum())
    }

    /// Closed-form differential entropy `Σ log σ + ½ log(2πe)`.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|&l| entropy_1d(l)).sum()
    }

    /// Log density of `tanh(pre_tanh)` under the squashed distribution.
    pub fn tanh_squash_log_prob(&self, pre_tanh: &[f64]) -> Result<f64> {
        let base = self.log_prob(pre_tanh)?;
        Ok(base - pre_tanh.iter().map(|&u| squash_correction(u)).sum::<f64>())
    }
}

pub(crate) fn log_prob_1d(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * PI).ln()
}

pub(crate) fn entropy_1d(log_std: f64) -> f64 {
    log_std + 0.5 * (2.0 * PI * E).ln()
}

/// `log(1 - tanh(u)^2 + eps)`.
pub(crate) fn squash_correction(u: f64) -> f64 {
    let t = u.tanh();
    (1.0 - t * t + SQUASH_EPS).ln()
}

/// d/du of [`squash_correction`].
pub(crate) fn squash_correction_grad(u: f64) -> f64 {
    let t = u.tanh();
    let s = 1.0 - t * t;
    -2.0 * t * s / (s + SQUASH_EPS)
}
