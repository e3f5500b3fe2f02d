use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Discrepancies are measured relative to `max(|analytic|, |numeric|, FLOOR)`.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckMode {
    /// Central difference along every coordinate.
    Coordinates,
    /// Central difference along `count` random unit directions, compared
    /// with the analytic directional derivative.
    Directions { count: usize, seed: u64 },
}

/// Worst relative discrepancy between the analytic gradient returned by
/// `loss` and central finite differences with step `eps`.
///
/// `loss` maps a parameter vector to `(value, gradient)`.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    eps: f64,
    mode: GradCheckMode,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let (_, analytic) = loss(params);
    if analytic.len() != params.len() {
        return Err(Error::dim(
            "analytic gradient",
            params.len(),
            analytic.len(),
        ));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0_f64;
    let mut compare = |a: f64, n: f64| {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
        if err.is_nan() {
            worst = f64::INFINITY;
        } else {
            worst = worst.max(err);
        }
    };
    match mode {
        GradCheckMode::Coordinates => {
            for i in 0..params.len() {
                probe[i] = params[i] + eps;
                let plus = loss(&probe).0;
                probe[i] = params[i] - eps;
                let minus = loss(&probe).0;
                probe[i] = params[i];
                compare(analytic[i], (plus - minus) / (2.0 * eps));
            }
        }
        GradCheckMode::Directions { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count {
                let mut dir: Vec<f64> = (0..params.len())
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = dir
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                dir.iter_mut().for_each(|x| *x /= norm);
                for ((p, x), d) in probe.iter_mut().zip(params).zip(&dir) {
                    *p = x + eps * d;
                }
                let plus = loss(&probe).0;
                for ((p, x), d) in probe.iter_mut().zip(params).zip(&dir) {
                    *p = x - eps * d;
                }
                let minus = loss(&probe).0;
                let directional: f64 = analytic.iter().zip(&dir).map(|(g, d)| g * d).sum();
                compare(directional, (plus - minus) / (2.0 * eps));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let loss = |p: &[f64]| (0.5 * p.iter().map(|x| x * x).sum::<f64>(), p.to_vec());
        let p = [0.3, -1.7, 2.2, 0.0, 5.0];
        let err = finite_diff_check(loss, &p, 1e-5, GradCheckMode::Coordinates).unwrap();
        assert!(err < 1e-8, "{err}");
        let err = finite_diff_check(
            loss,
            &p,
            1e-5,
            GradCheckMode::Directions { count: 8, seed: 1 },
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let loss = |p: &[f64]| (p[0] * p[0], vec![p[0]]);
        let err = finite_diff_check(loss, &[1.0], 1e-5, GradCheckMode::Coordinates).unwrap();
        assert!(err > 0.4);
    }
}
