//! Small differentiable MLP stack: batched forward/backward with an explicit
//! tape, Adam, closed-form diagonal Gaussian math and finite-difference checks.

mod adam;
mod gaussian;
mod gradcheck;
mod mlp;

pub use adam::AdamState;
pub(crate) use gaussian::{squash_correction, squash_correction_grad};
pub use gaussian::{DiagonalGaussian, LOG_STD_MAX, LOG_STD_MIN, SQUASH_EPS};
pub use gradcheck::{finite_diff_check, GradCheckMode};
pub use mlp::{Activation, Head, Linear, Mlp, MlpGrad, MlpTape};

/// Per-dimension affine normalizer `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub const STD_FLOOR: f64 = 1e-4;

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column statistics of `rows`, with the standard deviation floored.
    pub fn fit(rows: ndarray::ArrayView2<f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let dim = rows.ncols();
        let mut mean = vec![0.0; dim];
        for row in rows.rows() {
            for (m, x) in mean.iter_mut().zip(row.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in rows.rows() {
            for ((v, x), m) in var.iter_mut().zip(row.iter()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / n).sqrt().max(Self::STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, rows: ndarray::ArrayView2<f64>) -> ndarray::Array2<f64> {
        let mut out = rows.to_owned();
        for mut row in out.rows_mut() {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        out
    }
}
