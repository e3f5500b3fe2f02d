use serde::{Deserialize, Serialize};

use super::models::RewardModel;
use crate::data::{Dataset, Quality};
use crate::error::{Error, Result};

/// Gaps below this are treated as "the two reward distributions coincide".
const RELIABLE_GAP: f64 = 0.05;
const HISTOGRAM_BINS: usize = 20;

/// Default margin coefficient `c` (margin = `c·R`) for a diverse tier.
pub fn default_margin_coefficient(diverse: Quality) -> f64 {
    match diverse {
        Quality::Medium => 0.8,
        _ => 1.6,
    }
}

/// Equal-width histogram of reward values over `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
}

impl RewardHistogram {
    pub fn from_values(values: &[f64]) -> Self {
        let width = 2.0 / HISTOGRAM_BINS as f64;
        let edges = (0..=HISTOGRAM_BINS)
            .map(|i| -1.0 + i as f64 * width)
            .collect();
        let mut counts = vec![0; HISTOGRAM_BINS];
        for &v in values {
            let bin = (((v + 1.0) / width).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1);
            counts[bin as usize] += 1;
        }
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        Self {
            edges,
            counts,
            mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSelection {
    /// Largest |r| over the expert transitions.
    pub r_max: f64,
    pub coefficient: f64,
    pub margin: f64,
    pub expert: RewardHistogram,
    pub diverse: RewardHistogram,
    /// Mean expert reward minus mean diverse reward.
    pub gap: f64,
    pub reliable: bool,
}

/// Picks `m = c·R` from a reward model trained on expert data alone.
/// `coefficient` overrides the tier default.
pub fn select_margin(
    reward: &RewardModel,
    expert: &Dataset,
    diverse: &Dataset,
    coefficient: Option<f64>,
) -> Result<MarginSelection> {
    if expert.env != diverse.env {
        return Err(Error::Config(format!(
            "env mismatch: {} vs {}",
            expert.env, diverse.env
        )));
    }
    let c = coefficient.unwrap_or_else(|| default_margin_coefficient(diverse.quality));
    if !(c.is_finite() && c >= 0.0) {
        return Err(Error::Config(format!(
            "margin coefficient must be >= 0, got {c}"
        )));
    }
    let eval = |d: &Dataset| -> Result<Vec<f64>> {
        let (s, _, s_next) = d.arrays();
        Ok(reward.rewards(s.view(), s_next.view())?.to_vec())
    };
    let re = eval(expert)?;
    let rd = eval(diverse)?;
    let r_max = re.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let expert_h = RewardHistogram::from_values(&re);
    let diverse_h = RewardHistogram::from_values(&rd);
    let gap = expert_h.mean - diverse_h.mean;
    Ok(MarginSelection {
        r_max,
        coefficient: c,
        margin: c * r_max,
        reliable: gap.abs() >= RELIABLE_GAP,
        expert: expert_h,
        diverse: diverse_h,
        gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy;
    use crate::numerics::Normalizer;
    use crate::rng;
    use crate::simulator::SimArch;

    fn reward() -> RewardModel {
        RewardModel::new(
            &SimArch::default(),
            Normalizer::identity(2),
            &mut rng::stream(3, 0),
        )
        .unwrap()
    }

    #[test]
    fn tier_defaults() {
        assert_eq!(default_margin_coefficient(Quality::Random), 1.6);
        assert_eq!(default_margin_coefficient(Quality::Medium), 0.8);
    }

    #[test]
    fn identical_data_is_flagged() {
        let e = toy(Quality::Expert, 50, 0.0);
        let mut d = e.clone();
        d.quality = Quality::Random;
        let sel = select_margin(&reward(), &e, &d, None).unwrap();
        assert!(sel.gap.abs() < 1e-12);
        assert!(!sel.reliable);
        assert_eq!(sel.coefficient, 1.6);
        assert!(sel.margin > 0.0 && sel.margin < 2.0 * sel.r_max);
    }

    #[test]
    fn histograms_count_everything() {
        let h = RewardHistogram::from_values(&[-0.999, -0.5, 0.0, 0.5, 0.999, 1.0]);
        assert_eq!(h.counts.iter().sum::<usize>(), 6);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[HISTOGRAM_BINS - 1], 2);
        assert_eq!(h.edges.len(), HISTOGRAM_BINS + 1);
    }

    #[test]
    fn override_and_validation() {
        let e = toy(Quality::Expert, 20, 0.0);
        let d = toy(Quality::Medium, 20, 0.3);
        let sel = select_margin(&reward(), &e, &d, Some(0.5)).unwrap();
        assert!((sel.margin - 0.5 * sel.r_max).abs() < 1e-15);
        assert!(select_margin(&reward(), &e, &d, Some(-1.0)).is_err());
    }
}
