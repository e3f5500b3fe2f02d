//! Reward-free transition datasets: storage, persistence, mixing and
//! minibatch sampling.

mod collect;
mod io;

pub(crate) use collect::normalized_score;
pub use collect::{
    collect_dataset, collect_random, train_behavior_suite, BehaviorCheckpoint, BehaviorConfig,
    BehaviorSuite,
};
pub(crate) use io::{format_row, parse_row};
pub use io::{read_dataset, write_dataset, DATASET_FORMAT_VERSION};

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::EnvId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Expert,
    Medium,
    Random,
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quality::Expert => "expert",
            Quality::Medium => "medium",
            Quality::Random => "random",
        })
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Quality::Expert),
            "medium" => Ok(Quality::Medium),
            "random" => Ok(Quality::Random),
            other => Err(Error::Config(format!("unknown dataset tier `{other}`"))),
        }
    }
}

/// One `(s, a, s')` tuple. The true reward is kept for diagnostics only and
/// is reachable solely through [`Transition::diagnostic_true_reward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    true_reward: Option<f64>,
}

impl Transition {
    pub fn new(s: Vec<f64>, a: Vec<f64>, s_next: Vec<f64>) -> Self {
        Self {
            s,
            a,
            s_next,
            true_reward: None,
        }
    }

    pub fn with_true_reward(mut self, r: f64) -> Self {
        self.true_reward = Some(r);
        self
    }

    pub fn diagnostic_true_reward(&self) -> Option<f64> {
        self.true_reward
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: EnvId,
    pub quality: Quality,
    pub state_dim: usize,
    pub action_dim: usize,
    transitions: Vec<Transition>,
    pub seed: u64,
    /// Mean true-environment return of the collecting policy.
    pub generator_return: f64,
}

impl Dataset {
    pub fn new(
        env: EnvId,
        quality: Quality,
        state_dim: usize,
        action_dim: usize,
        transitions: Vec<Transition>,
        seed: u64,
        generator_return: f64,
    ) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::Config(
                "dataset must contain at least one transition".into(),
            ));
        }
        let has_reward = transitions[0].true_reward.is_some();
        for (i, t) in transitions.iter().enumerate() {
            if t.s.len() != state_dim || t.s_next.len() != state_dim {
                return Err(Error::dim(
                    format!("transition {i} state"),
                    state_dim,
                    t.s.len().max(t.s_next.len()),
                ));
            }
            if t.a.len() != action_dim {
                return Err(Error::dim(
                    format!("transition {i} action"),
                    action_dim,
                    t.a.len(),
                ));
            }
            if t.s
                .iter()
                .chain(&t.a)
                .chain(&t.s_next)
                .any(|x| !x.is_finite())
            {
                return Err(Error::Numerical(format!(
                    "transition {i} has non-finite entries"
                )));
            }
            if t.true_reward.is_some() != has_reward {
                return Err(Error::Config(
                    "true reward must be present on all transitions or none".into(),
                ));
            }
        }
        Ok(Self {
            env,
            quality,
            state_dim,
            action_dim,
            transitions,
            seed,
            generator_return,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn has_true_reward(&self) -> bool {
        self.transitions[0].true_reward.is_some()
    }

    /// Splits off the first `n` transitions, returning `(head, tail)`.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!(
                "cannot split {} transitions at {n}",
                self.len()
            )));
        }
        let make = |ts: &[Transition]| {
            Dataset::new(
                self.env,
                self.quality,
                self.state_dim,
                self.action_dim,
                ts.to_vec(),
                self.seed,
                self.generator_return,
            )
        };
        Ok((make(&self.transitions[..n])?, make(&self.transitions[n..])?))
    }

    /// Row-stacked `(states, actions, next_states)`.
    pub fn arrays(&self) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let n = self.len();
        let mut s = Array2::zeros((n, self.state_dim));
        let mut a = Array2::zeros((n, self.action_dim));
        let mut sn = Array2::zeros((n, self.state_dim));
        for (i, t) in self.transitions.iter().enumerate() {
            s.row_mut(i).assign(&ndarray::aview1(&t.s));
            a.row_mut(i).assign(&ndarray::aview1(&t.a));
            sn.row_mut(i).assign(&ndarray::aview1(&t.s_next));
        }
        (s, a, sn)
    }

    /// SHA-256 over the header fields and the exact bit patterns of all values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "{}|{}|{}|{}|{}|",
            self.env, self.quality, self.state_dim, self.action_dim, self.seed
        ));
        h.update(self.generator_return.to_bits().to_le_bytes());
        for t in &self.transitions {
            for x in
                t.s.iter()
                    .chain(&t.a)
                    .chain(&t.s_next)
                    .chain(t.true_reward.iter())
            {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        let mut b = Batch::with_capacity(batch_size, self.state_dim, self.action_dim);
        for _ in 0..batch_size {
            b.push(&self.transitions[rng.random_range(0..self.len())]);
        }
        b.n_expert = if self.quality == Quality::Expert {
            batch_size
        } else {
            0
        };
        b.finish()
    }
}

/// Expert and diverse datasets with mixing weights proportional to size.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedDataset {
    pub expert: Dataset,
    pub diverse: Dataset,
    pub w_expert: f64,
    pub w_diverse: f64,
}

pub fn mix(expert: Dataset, diverse: Dataset) -> Result<MixedDataset> {
    if expert.env != diverse.env {
        return Err(Error::Config(format!(
            "cannot mix {} data with {} data",
            expert.env, diverse.env
        )));
    }
    if expert.state_dim != diverse.state_dim || expert.action_dim != diverse.action_dim {
        return Err(Error::dim(
            "mixed dataset state",
            expert.state_dim,
            diverse.state_dim,
        ));
    }
    if expert.is_empty() || diverse.is_empty() {
        return Err(Error::Config("mixing needs two non-empty datasets".into()));
    }
    let total = (expert.len() + diverse.len()) as f64;
    let w_expert = expert.len() as f64 / total;
    Ok(MixedDataset {
        w_diverse: 1.0 - w_expert,
        w_expert,
        expert,
        diverse,
    })
}

impl MixedDataset {
    /// I.i.d. draws: expert with probability `w_expert`, diverse otherwise.
    /// Expert rows come first in the returned batch.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        let picks: Vec<bool> = (0..batch_size)
            .map(|_| rng.random::<f64>() < self.w_expert)
            .collect();
        let n_expert = picks.iter().filter(|&&e| e).count();
        self.draw(n_expert, batch_size - n_expert, rng)
    }

    /// Fixed sub-batch sizes `round(w_expert · batch_size)` and the remainder.
    pub fn sample_stratified<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        let n_expert = ((self.w_expert * batch_size as f64).round() as usize)
            .clamp(1, batch_size.saturating_sub(1).max(1));
        self.draw(n_expert, batch_size - n_expert, rng)
    }

    fn draw<R: Rng + ?Sized>(&self, n_expert: usize, n_diverse: usize, rng: &mut R) -> Batch {
        let mut b = Batch::with_capacity(
            n_expert + n_diverse,
            self.expert.state_dim,
            self.expert.action_dim,
        );
        for _ in 0..n_expert {
            b.push(&self.expert.transitions[rng.random_range(0..self.expert.len())]);
        }
        for _ in 0..n_diverse {
            b.push(&self.diverse.transitions[rng.random_range(0..self.diverse.len())]);
        }
        b.n_expert = n_expert;
        b.finish()
    }
}

/// Either a single dataset or an expert/diverse mix.
#[derive(Clone, Copy, Debug)]
pub enum DataSource<'a> {
    Single(&'a Dataset),
    Mixed(&'a MixedDataset),
}

impl<'a> DataSource<'a> {
    pub fn expert(&self) -> &'a Dataset {
        match self {
            DataSource::Single(d) => d,
            DataSource::Mixed(m) => &m.expert,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.expert().state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.expert().action_dim
    }

    pub fn env(&self) -> EnvId {
        self.expert().env
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        match self {
            DataSource::Single(d) => d.sample_batch(batch_size, rng),
            DataSource::Mixed(m) => m.sample_batch(batch_size, rng),
        }
    }

    /// All transitions of every constituent dataset.
    pub fn all(&self) -> Vec<&'a Transition> {
        match self {
            DataSource::Single(d) => d.transitions.iter().collect(),
            DataSource::Mixed(m) => m
                .expert
                .transitions
                .iter()
                .chain(&m.diverse.transitions)
                .collect(),
        }
    }

    pub fn hashes(&self) -> Vec<String> {
        match self {
            DataSource::Single(d) => vec![d.content_hash()],
            DataSource::Mixed(m) => vec![m.expert.content_hash(), m.diverse.content_hash()],
        }
    }
}

/// Flat `s`, `a`, `s'` rows with the batch's state and action widths.
type RowBuf = (Vec<f64>, Vec<f64>, Vec<f64>, usize, usize);

/// Row-stacked minibatch. In mixed batches the first `n_expert` rows are
/// expert transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub s_next: Array2<f64>,
    pub n_expert: usize,
    buf: Option<RowBuf>,
}

impl Batch {
    fn with_capacity(n: usize, ds: usize, da: usize) -> Self {
        Self {
            s: Array2::zeros((0, ds)),
            a: Array2::zeros((0, da)),
            s_next: Array2::zeros((0, ds)),
            n_expert: 0,
            buf: Some((
                Vec::with_capacity(n * ds),
                Vec::with_capacity(n * da),
                Vec::with_capacity(n * ds),
                ds,
                da,
            )),
        }
    }

    fn push(&mut self, t: &Transition) {
        let (s, a, sn, _, _) = self.buf.as_mut().expect("batch under construction");
        s.extend_from_slice(&t.s);
        a.extend_from_slice(&t.a);
        sn.extend_from_slice(&t.s_next);
    }

    fn finish(mut self) -> Self {
        let (s, a, sn, ds, da) = self.buf.take().expect("batch under construction");
        let n = s.len() / ds;
        self.s = Array2::from_shape_vec((n, ds), s).expect("row-major states");
        self.a = Array2::from_shape_vec((n, da), a).expect("row-major actions");
        self.s_next = Array2::from_shape_vec((n, ds), sn).expect("row-major next states");
        self
    }

    /// Builds a batch directly from transitions; the first `n_expert` are expert rows.
    pub fn from_transitions(ts: &[&Transition], n_expert: usize) -> Result<Self> {
        let first = ts
            .first()
            .ok_or_else(|| Error::Config("empty batch".into()))?;
        let mut b = Batch::with_capacity(ts.len(), first.s.len(), first.a.len());
        for t in ts {
            if t.s.len() != first.s.len() || t.a.len() != first.a.len() {
                return Err(Error::dim("batch row", first.s.len(), t.s.len()));
            }
            b.push(t);
        }
        b.n_expert = n_expert.min(ts.len());
        Ok(b.finish())
    }

    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_mixed(&self) -> bool {
        self.n_expert > 0 && self.n_expert < self.len()
    }
}

/// Small synthetic dataset for unit tests.
#[cfg(test)]
pub(crate) fn toy(quality: Quality, n: usize, offset: f64) -> Dataset {
    let ts = (0..n)
        .map(|i| {
            let x = offset + i as f64;
            Transition::new(vec![x, -x], vec![0.1 * x], vec![x + 1.0, -x - 1.0])
        })
        .collect();
    Dataset::new(EnvId::PointMass, quality, 2, 1, ts, 0, -1.0).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn mixing_weights() {
        let m = mix(
            toy(Quality::Expert, 10_000, 0.0),
            toy(Quality::Random, 10_000, 0.0),
        )
        .unwrap();
        assert_eq!((m.w_expert, m.w_diverse), (0.5, 0.5));
        let m = mix(
            toy(Quality::Expert, 15_000, 0.0),
            toy(Quality::Random, 5_000, 0.0),
        )
        .unwrap();
        assert!((m.w_expert - 0.75).abs() < 1e-12);
        assert_eq!(m.w_expert + m.w_diverse, 1.0);
    }

    #[test]
    fn empty_and_mismatched_rejected() {
        assert!(Dataset::new(EnvId::PointMass, Quality::Random, 2, 1, vec![], 0, 0.0).is_err());
        let mut other = toy(Quality::Random, 3, 0.0);
        other.env = EnvId::Pendulum;
        assert!(mix(toy(Quality::Expert, 3, 0.0), other).is_err());
    }

    #[test]
    fn single_element_batch_repeats() {
        let d = toy(Quality::Expert, 1, 2.0);
        let b = d.sample_batch(5, &mut rng::stream(0, 0));
        for i in 0..5 {
            assert_eq!(b.s.row(i).to_vec(), vec![2.0, -2.0]);
        }
    }

    #[test]
    fn mixture_fraction() {
        let m = mix(
            toy(Quality::Expert, 100, 0.0),
            toy(Quality::Random, 100, 1000.0),
        )
        .unwrap();
        let b = m.sample_batch(100_000, &mut rng::stream(1, 0));
        let frac = b.n_expert as f64 / b.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        assert!(b.s.column(0).iter().take(b.n_expert).all(|&x| x < 1000.0));
        assert!(b.s.column(0).iter().skip(b.n_expert).all(|&x| x >= 1000.0));
    }

    #[test]
    fn seeded_draws_reproducible() {
        let m = mix(
            toy(Quality::Expert, 50, 0.0),
            toy(Quality::Random, 30, 100.0),
        )
        .unwrap();
        assert_eq!(
            m.sample_batch(64, &mut rng::stream(9, 3)),
            m.sample_batch(64, &mut rng::stream(9, 3))
        );
        let b = m.sample_stratified(64, &mut rng::stream(9, 3));
        assert_eq!(b.n_expert, 40);
        assert!(b.is_mixed());
    }

    #[test]
    fn hash_tracks_content() {
        let a = toy(Quality::Expert, 5, 0.0);
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.transitions[3].a[0] += 1e-12;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(ne in 1usize..5000, nd in 1usize..5000) {
            let m = mix(toy(Quality::Expert, ne, 0.0), toy(Quality::Random, nd, 0.0)).unwrap();
            prop_assert_eq!(m.w_expert + m.w_diverse, 1.0);
            prop_assert!((m.w_diverse - nd as f64 / (ne + nd) as f64).abs() < 1e-15);
        }
    }
}
