use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::networks::{ActionSpace, GaussianPolicy, PolicyArch};
use super::sac::{kl_regularizer, ExpertBatch};
use crate::data::{Batch, Dataset};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::numerics::AdamState;
use crate::rng;

const BC_STREAM: u64 = 0xBC_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub arch: PolicyArch,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            arch: PolicyArch::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BcOutcome {
    pub policy: GaussianPolicy,
    /// Full-dataset action NLL after each epoch.
    pub epoch_nll: Vec<f64>,
}

/// Behavior cloning: maximizes the squashed log-likelihood of dataset
/// actions with shuffled minibatch Adam.
pub fn bc_train(expert: &Dataset, spec: &EnvSpec, cfg: &BcConfig) -> Result<BcOutcome> {
    if expert.env != spec.id
        || expert.state_dim != spec.state_dim
        || expert.action_dim != spec.action_dim
    {
        return Err(Error::Config(format!(
            "dataset for {} does not match env {}",
            expert.env, spec.id
        )));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("BC needs batch_size >= 1 and lr > 0".into()));
    }
    let space = ActionSpace::for_env(spec);
    let mut g = rng::stream(cfg.seed, BC_STREAM);
    let mut policy = GaussianPolicy::new(space.clone(), &cfg.arch, &mut g)?;
    let mut adam = AdamState::for_mlp(&policy.net);
    let all: Vec<_> = expert.transitions().iter().collect();
    let full = ExpertBatch::from_batch(&space, &Batch::from_transitions(&all, all.len())?);
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut epoch_nll = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut g);
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<_> = chunk.iter().map(|&i| all[i]).collect();
            let b = ExpertBatch::from_batch(&space, &Batch::from_transitions(&rows, rows.len())?);
            let term = kl_regularizer(&policy, &b)?;
            adam.step_mlp(&mut policy.net, &term.grad, cfg.lr)?;
        }
        epoch_nll.push(kl_regularizer(&policy, &full)?.value);
    }
    Ok(BcOutcome { policy, epoch_nll })
}
