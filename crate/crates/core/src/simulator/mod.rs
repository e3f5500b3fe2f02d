//! Stage 1: joint training of the reward `r(s, s')` and the high-entropy
//! Gaussian dynamics ensemble that together form the learned environment.

mod losses;
mod margin;
mod models;
mod train;

pub use losses::{
    relu_margin_penalty, reward_loss, transition_entropy_term, transition_loss,
    transition_nll_loss, RewardLoss, RewardMode, RolloutNoise, TransitionLoss,
};
pub use margin::{default_margin_coefficient, select_margin, MarginSelection, RewardHistogram};
pub use models::{RewardModel, TransitionModel};
pub use train::{
    fit_low_variance_transition, train_simulator, NllFitConfig, SimLogEntry, SimOutcome,
    SimTrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::numerics::Activation;

/// Network shapes for the simulator. Layer counts are numbers of affine layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimArch {
    pub members: usize,
    pub transition_layers: usize,
    pub transition_hidden: usize,
    pub reward_layers: usize,
    pub reward_hidden: usize,
    pub activation: Activation,
}

impl Default for SimArch {
    fn default() -> Self {
        Self {
            members: 7,
            transition_layers: 7,
            transition_hidden: 64,
            reward_layers: 4,
            reward_hidden: 64,
            activation: Activation::Tanh,
        }
    }
}

pub(crate) fn layer_sizes(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(std::iter::repeat_n(hidden, layers.saturating_sub(1)));
    sizes.push(output);
    sizes
}
