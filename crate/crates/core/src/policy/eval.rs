use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ActMode, Actor};
use crate::envs::{self, EnvSpec};
use crate::error::{Error, Result};
use crate::rng;

const EVAL_RESET_STREAM: u64 = 0xE7A1_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the episode returns.
    pub std: f64,
}

impl EvalResult {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&returns);
        Self { returns, mean, std }
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Undiscounted true-environment returns of `episodes` full episodes run
/// side by side with deterministic actions. Episode `i` starts from a reset
/// drawn from `(seed, i)`.
pub fn evaluate_actor(
    spec: &EnvSpec,
    actor: &dyn Actor,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if actor.state_dim() != spec.state_dim || actor.action_dim() != spec.action_dim {
        return Err(Error::dim(
            "policy for evaluation env",
            spec.state_dim,
            actor.state_dim(),
        ));
    }
    if episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    let mut states: Vec<_> = (0..episodes)
        .map(|i| envs::reset_with(spec, &mut rng::stream(seed, EVAL_RESET_STREAM + i as u64)))
        .collect();
    let mut returns = vec![0.0; episodes];
    let mut unused = rng::stream(seed, EVAL_RESET_STREAM - 1);
    for _ in 0..spec.horizon {
        let mut obs = Array2::zeros((episodes, spec.state_dim));
        for (i, st) in states.iter().enumerate() {
            obs.row_mut(i)
                .assign(&ndarray::aview1(&envs::observe(spec, st)));
        }
        let actions = actor.act(obs.view(), ActMode::Deterministic, &mut unused)?;
        for (i, st) in states.iter_mut().enumerate() {
            let out = envs::step(spec, st, actions.row(i).as_slice().expect("row-major"))?;
            returns[i] += out.true_reward;
            *st = out.next;
        }
    }
    Ok(EvalResult::from_returns(returns))
}
