//! Stage 2: policy optimization inside the learned simulator (SAC with an
//! expert-likelihood regularizer, DDPG), plus behavior cloning and
//! true-environment evaluation.

mod bc;
mod ddpg;
mod eval;
mod networks;
mod replay;
mod rollout;
mod sac;
mod train;

pub use bc::{bc_train, BcConfig, BcOutcome};
pub use ddpg::{ddpg_actor_loss, ddpg_targets, DdpgActorLoss, DdpgAgent, DdpgHyper};
pub use eval::{evaluate_actor, mean_std, EvalResult};
pub use networks::{
    ActionSpace, CriticPair, DeterministicPolicy, GaussianPolicy, PolicyArch, SquashedSample,
    ACTION_EDGE, DATA_ACTION_CLIP,
};
pub use replay::{ReplayBatch, ReplayBuffer};
pub use rollout::{virtual_rollout, StateGuard, VirtualRollout, VirtualStep, EXPLOSION_FACTOR};
pub use sac::{
    critic_loss, kl_regularizer, sac_actor_loss, sac_targets, temperature_grad, ActorLoss,
    CriticLoss, ExpertBatch, KlTerm, SacAgent, SacHyper, UpdateStats,
};
pub use train::{
    train_policy, Algo, PolicyLogEntry, PolicyOutcome, PolicyTrainConfig, TrainedPolicy,
};

use ndarray::{Array2, ArrayView2};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::rng::Rng64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    /// Mean action.
    Deterministic,
    /// Sampled / noise-perturbed action.
    Explore,
}

/// Anything that maps a batch of observations to env-unit actions.
pub trait Actor {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn act(&self, states: ArrayView2<f64>, mode: ActMode, rng: &mut Rng64) -> Result<Array2<f64>>;
}

/// Uniform random actions within the env bounds, in either mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomActor {
    pub spec: EnvSpec,
}

impl Actor for RandomActor {
    fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    fn act(&self, states: ArrayView2<f64>, _: ActMode, rng: &mut Rng64) -> Result<Array2<f64>> {
        if states.ncols() != self.spec.state_dim {
            return Err(Error::dim(
                "random actor state",
                self.spec.state_dim,
                states.ncols(),
            ));
        }
        let mut out = Array2::zeros((states.nrows(), self.spec.action_dim));
        for mut row in out.rows_mut() {
            row.assign(&ndarray::aview1(&self.spec.random_action(rng)));
        }
        Ok(out)
    }
}
