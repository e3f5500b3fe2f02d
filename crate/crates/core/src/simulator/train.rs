use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::losses::{reward_loss, transition_loss, transition_nll_loss, RewardMode, RolloutNoise};
use super::models::{RewardModel, TransitionModel};
use super::SimArch;
use crate::data::{mix, Batch, Dataset, MixedDataset};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Normalizer};
use crate::rng::{self, Rng64};

const INIT_STREAM: u64 = 0x51_0001;
const BATCH_STREAM: u64 = 0x51_0002;
const NOISE_STREAM: u64 = 0x51_0003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimTrainConfig {
    /// Entropy weight on the transition objective.
    pub alpha: f64,
    /// Margin penalty weight.
    pub beta: f64,
    /// Required expert/diverse reward gap. Needed when a diverse set is given.
    pub margin: Option<f64>,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Reward updates per transition update.
    pub reward_steps: usize,
    pub seed: u64,
    pub arch: SimArch,
}

impl Default for SimTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 2.0,
            margin: None,
            lr: 1e-3,
            batch_size: 256,
            iterations: 30_000,
            reward_steps: 1,
            seed: 0,
            arch: SimArch::default(),
        }
    }
}

impl SimTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a finite value >= 0");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be > 0");
        }
        if let Some(m) = self.margin {
            if !(m >= 0.0 && m.is_finite()) {
                return bad("margin must be >= 0");
            }
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if self.batch_size < 2 || self.reward_steps == 0 {
            return bad("batch_size must be >= 2 and reward_steps >= 1");
        }
        if self.arch.members == 0
            || self.arch.transition_layers == 0
            || self.arch.reward_layers == 0
        {
            return bad("network layer and member counts must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimLogEntry {
    pub iteration: usize,
    pub reward_loss: f64,
    pub transition_loss: f64,
    pub mean_expert_reward: f64,
    pub mean_rollout_reward: f64,
    pub entropy: f64,
    pub penalty: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub transition: TransitionModel,
    pub reward: RewardModel,
    pub log: Vec<SimLogEntry>,
    pub mode: RewardMode,
    /// Iteration at which a non-finite loss stopped training; the returned
    /// models are those from before that iteration.
    pub diverged: Option<usize>,
}

/// Frozen normalization statistics over every transition in the inputs.
pub(crate) struct SimStats {
    pub state: Normalizer,
    pub action: Normalizer,
    pub delta_scale: Vec<f64>,
}

pub(crate) fn fit_stats(datasets: &[&Dataset]) -> SimStats {
    let arrays: Vec<_> = datasets.iter().map(|d| d.arrays()).collect();
    let cat = |pick: usize| {
        let views: Vec<_> = arrays
            .iter()
            .map(|t| [&t.0, &t.1, &t.2][pick].view())
            .collect();
        concatenate(Axis(0), &views).expect("datasets share dimensions")
    };
    let s = cat(0);
    let a = cat(1);
    let sn = cat(2);
    let delta = Normalizer::fit((&sn - &s).view());
    SimStats {
        state: Normalizer::fit(s.view()),
        action: Normalizer::fit(a.view()),
        delta_scale: delta.std,
    }
}

enum Source {
    Single(Dataset),
    Mixed(MixedDataset),
}

impl Source {
    fn batch(&self, n: usize, rng: &mut Rng64) -> Batch {
        match self {
            Source::Single(d) => d.sample_batch(n, rng),
            Source::Mixed(m) => m.sample_stratified(n, rng),
        }
    }
}

/// Alternating descent-ascent on the reward and the transition ensemble.
/// With a diverse dataset the reward loss carries the margin penalty and
/// batches are stratified by the mixing weights.
pub fn train_simulator(
    cfg: &SimTrainConfig,
    expert: &Dataset,
    diverse: Option<&Dataset>,
) -> Result<SimOutcome> {
    cfg.validate()?;
    let (source, mode) = match diverse {
        None => (Source::Single(expert.clone()), RewardMode::Single),
        Some(d) => {
            let margin = cfg
                .margin
                .ok_or_else(|| Error::Config("multi-dataset training needs a margin".into()))?;
            (
                Source::Mixed(mix(expert.clone(), d.clone())?),
                RewardMode::Multi {
                    margin,
                    beta: cfg.beta,
                },
            )
        }
    };
    let stats = match diverse {
        None => fit_stats(&[expert]),
        Some(d) => fit_stats(&[expert, d]),
    };
    let mut init = rng::stream(cfg.seed, INIT_STREAM);
    let mut transition = TransitionModel::new(
        &cfg.arch,
        stats.state.clone(),
        stats.action,
        stats.delta_scale,
        &mut init,
    )?;
    let mut reward = RewardModel::new(&cfg.arch, stats.state, &mut init)?;
    let mut batch_rng = rng::stream(cfg.seed, BATCH_STREAM);
    let mut noise_rng = rng::stream(cfg.seed, NOISE_STREAM);
    let mut reward_adam = AdamState::for_mlp(&reward.net);
    let mut member_adam: Vec<AdamState> =
        transition.members.iter().map(AdamState::for_mlp).collect();
    let (k, ds) = (transition.num_members(), transition.state_dim());

    let mut log = Vec::with_capacity(cfg.iterations);
    let mut diverged = None;
    'outer: for it in 0..cfg.iterations {
        let batch = source.batch(cfg.batch_size, &mut batch_rng);
        let mut first = None;
        for step in 0..cfg.reward_steps {
            let b = if step == 0 {
                batch.clone()
            } else {
                source.batch(cfg.batch_size, &mut batch_rng)
            };
            let noise = RolloutNoise::draw(&mut noise_rng, b.len(), k, ds);
            let rl = reward_loss(&reward, &transition, &b, &noise, mode)?;
            if !rl.loss.is_finite() || !rl.grad.is_finite() {
                diverged = Some(it);
                break 'outer;
            }
            reward_adam.step_mlp(&mut reward.net, &rl.grad, cfg.lr)?;
            first.get_or_insert(rl);
        }
        let noises: Vec<Array2<f64>> = (0..k)
            .map(|_| rng::normal_matrix(&mut noise_rng, batch.len(), ds))
            .collect();
        let tl = transition_loss(&transition, &reward, &batch, &noises, cfg.alpha)?;
        if !tl.loss.is_finite() || tl.grads.iter().any(|g| !g.is_finite()) {
            diverged = Some(it);
            break;
        }
        for ((net, adam), g) in transition
            .members
            .iter_mut()
            .zip(&mut member_adam)
            .zip(&tl.grads)
        {
            adam.step_mlp(net, g, cfg.lr)?;
        }
        let rl = first.expect("reward_steps >= 1");
        log.push(SimLogEntry {
            iteration: it,
            reward_loss: rl.loss,
            transition_loss: tl.loss,
            mean_expert_reward: rl.mean_expert,
            mean_rollout_reward: rl.mean_rollout,
            entropy: tl.entropy,
            penalty: rl.penalty,
        });
    }
    Ok(SimOutcome {
        transition,
        reward,
        log,
        mode,
        diverged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NllFitConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for NllFitConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            iterations: 30_000,
            seed: 0,
        }
    }
}

/// Maximum-likelihood dynamics fit (no entropy bonus, no reward signal).
/// The ensemble reuses `template`'s shape and normalization so the two
/// models differ only in how they were trained.
pub fn fit_low_variance_transition(
    template: &TransitionModel,
    cfg: &NllFitConfig,
    expert: &Dataset,
    diverse: Option<&Dataset>,
) -> Result<TransitionModel> {
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config(
            "NLL fit needs lr > 0 and batch_size >= 1".into(),
        ));
    }
    let source = match diverse {
        None => Source::Single(expert.clone()),
        Some(d) => Source::Mixed(mix(expert.clone(), d.clone())?),
    };
    let sizes = template.members[0].sizes();
    let hidden = sizes.get(1).copied().unwrap_or(1);
    let arch = SimArch {
        members: template.num_members(),
        transition_layers: sizes.len() - 1,
        transition_hidden: hidden,
        activation: template.members[0].activation,
        ..SimArch::default()
    };
    let mut init = rng::stream(cfg.seed, INIT_STREAM ^ 0xFF);
    let mut model = TransitionModel::new(
        &arch,
        template.state_norm.clone(),
        template.action_norm.clone(),
        template.delta_scale.clone(),
        &mut init,
    )?;
    let mut batch_rng = rng::stream(cfg.seed, BATCH_STREAM ^ 0xFF);
    let mut adams: Vec<AdamState> = model.members.iter().map(AdamState::for_mlp).collect();
    for _ in 0..cfg.iterations {
        let batch = source.batch(cfg.batch_size, &mut batch_rng);
        let (loss, grads) = transition_nll_loss(&model, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("NLL dynamics fit diverged".into()));
        }
        for ((net, adam), g) in model.members.iter_mut().zip(&mut adams).zip(&grads) {
            adam.step_mlp(net, g, cfg.lr)?;
        }
    }
    Ok(model)
}
