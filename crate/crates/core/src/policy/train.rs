use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ddpg::{DdpgAgent, DdpgHyper};
use super::eval::evaluate_actor;
use super::networks::{ActionSpace, DeterministicPolicy, GaussianPolicy, PolicyArch};
use super::replay::ReplayBuffer;
use super::rollout::{virtual_rollout, StateGuard};
use super::sac::{ExpertBatch, SacAgent, SacHyper, UpdateStats};
use super::{ActMode, Actor};
use crate::checkpoint::Checkpoint;
use crate::data::DataSource;
use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::rng::{self, Rng64};
use crate::simulator::{RewardModel, TransitionModel};

const AGENT_STREAM: u64 = 0x9_0001;
const ROLLOUT_STREAM: u64 = 0x9_0002;
const UPDATE_STREAM: u64 = 0x9_0003;
const EVAL_SEED_SALT: u64 = 0x7EA1_5EED;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Sac,
    Ddpg,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Sac => "sac",
            Algo::Ddpg => "ddpg",
        })
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sac" => Ok(Algo::Sac),
            "ddpg" => Ok(Algo::Ddpg),
            other => Err(Error::Config(format!(
                "unknown algorithm `{other}` (expected sac or ddpg)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyTrainConfig {
    pub algo: Algo,
    pub gamma: f64,
    /// Weight of the expert-likelihood regularizer.
    pub lambda: f64,
    pub tau: f64,
    /// Steps per branched rollout.
    pub horizon: usize,
    pub episodes: usize,
    pub grad_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Branched rollouts started per episode.
    pub rollouts_per_episode: usize,
    pub replay_capacity: usize,
    pub init_temperature: f64,
    /// DDPG exploration noise in normalized action units.
    pub exploration_std: f64,
    /// True-environment evaluation cadence in episodes (0 disables).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub arch: PolicyArch,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Sac,
            gamma: 0.99,
            lambda: 1.0,
            tau: 0.005,
            horizon: 5,
            episodes: 10_000,
            grad_steps: 5,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            rollouts_per_episode: 1,
            replay_capacity: 1_000_000,
            init_temperature: 1.0,
            exploration_std: 0.1,
            eval_every: 100,
            eval_episodes: 20,
            arch: PolicyArch::default(),
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        if self.horizon == 0 || self.rollouts_per_episode == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "horizon, rollouts_per_episode and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lambda >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("lambda must be >= 0 and lr > 0".into()));
        }
        Ok(())
    }

    fn sac_hyper(&self) -> SacHyper {
        SacHyper {
            gamma: self.gamma,
            tau: self.tau,
            lr: self.lr,
            lambda: self.lambda,
            init_temperature: self.init_temperature,
            ..SacHyper::default()
        }
    }

    fn ddpg_hyper(&self) -> DdpgHyper {
        DdpgHyper {
            gamma: self.gamma,
            tau: self.tau,
            lr: self.lr,
            lambda: self.lambda,
            noise_std: self.exploration_std,
        }
    }
}

/// Either kind of trained actor.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedPolicy {
    Gaussian(GaussianPolicy),
    Deterministic(DeterministicPolicy),
}

impl TrainedPolicy {
    pub fn space(&self) -> &ActionSpace {
        match self {
            TrainedPolicy::Gaussian(p) => &p.space,
            TrainedPolicy::Deterministic(p) => &p.space,
        }
    }

    pub fn to_checkpoint(&self, env: EnvId, config: serde_json::Value) -> Checkpoint {
        match self {
            TrainedPolicy::Gaussian(p) => p.to_checkpoint(env, config),
            TrainedPolicy::Deterministic(p) => p.to_checkpoint(env, config),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        match c.header.kind.as_str() {
            "gaussian_policy" => Ok(TrainedPolicy::Gaussian(GaussianPolicy::from_checkpoint(c)?)),
            "deterministic_policy" => Ok(TrainedPolicy::Deterministic(
                DeterministicPolicy::from_checkpoint(c)?,
            )),
            other => Err(Error::Config(format!(
                "`{other}` checkpoint is not a policy"
            ))),
        }
    }
}

impl Actor for TrainedPolicy {
    fn state_dim(&self) -> usize {
        self.space().state_dim()
    }

    fn action_dim(&self) -> usize {
        self.space().action_dim()
    }

    fn act(
        &self,
        states: ndarray::ArrayView2<f64>,
        mode: ActMode,
        rng: &mut Rng64,
    ) -> Result<ndarray::Array2<f64>> {
        match self {
            TrainedPolicy::Gaussian(p) => p.act(states, mode, rng),
            TrainedPolicy::Deterministic(p) => p.act(states, mode, rng),
        }
    }
}

enum Agent {
    Sac(Box<SacAgent>),
    Ddpg(Box<DdpgAgent>),
}

impl Agent {
    fn actor(&self) -> &dyn Actor {
        match self {
            Agent::Sac(a) => &a.policy,
            Agent::Ddpg(a) => &a.actor,
        }
    }

    fn snapshot(&self) -> TrainedPolicy {
        match self {
            Agent::Sac(a) => TrainedPolicy::Gaussian(a.policy.clone()),
            Agent::Ddpg(a) => TrainedPolicy::Deterministic(a.actor.clone()),
        }
    }

    fn update(
        &mut self,
        batch: &super::ReplayBatch,
        expert: Option<&ExpertBatch>,
        rng: &mut Rng64,
    ) -> Result<UpdateStats> {
        match self {
            Agent::Sac(a) => a.update(batch, expert, rng),
            Agent::Ddpg(a) => a.update(batch, expert),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogEntry {
    pub episode: usize,
    pub buffer_len: usize,
    pub eval_mean: f64,
    pub eval_std: f64,
    /// Averages over the updates since the previous entry.
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug)]
pub struct PolicyOutcome {
    /// Best policy by periodic evaluation (the final one when evaluation is off).
    pub policy: TrainedPolicy,
    pub final_policy: TrainedPolicy,
    pub log: Vec<PolicyLogEntry>,
    pub best_eval: Option<f64>,
    pub buffer_len: usize,
    pub truncated_rollouts: usize,
}

/// Policy optimization entirely inside the learned simulator: each episode
/// adds branched model rollouts to the replay buffer and then performs a
/// fixed number of gradient updates. The true environment is only used for
/// the periodic evaluation that picks the returned policy.
pub fn train_policy(
    cfg: &PolicyTrainConfig,
    transition: &TransitionModel,
    reward: &RewardModel,
    source: &DataSource,
    spec: &EnvSpec,
) -> Result<PolicyOutcome> {
    cfg.validate()?;
    if source.env() != spec.id
        || transition.state_dim() != spec.state_dim
        || transition.action_dim() != spec.action_dim
    {
        return Err(Error::dim(
            "simulator for env",
            spec.state_dim,
            transition.state_dim(),
        ));
    }
    let space = ActionSpace::for_env(spec);
    let mut init = rng::stream(cfg.seed, AGENT_STREAM);
    let mut agent = match cfg.algo {
        Algo::Sac => Agent::Sac(Box::new(SacAgent::new(
            space.clone(),
            &cfg.arch,
            cfg.sac_hyper(),
            &mut init,
        )?)),
        Algo::Ddpg => Agent::Ddpg(Box::new(DdpgAgent::new(
            space.clone(),
            &cfg.arch,
            cfg.ddpg_hyper(),
            &mut init,
        )?)),
    };
    let guard = StateGuard::from_source(source);
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity, spec.state_dim, spec.action_dim)?;
    let mut roll_rng = rng::stream(cfg.seed, ROLLOUT_STREAM);
    let mut upd_rng = rng::stream(cfg.seed, UPDATE_STREAM);
    let eval_seed = cfg.seed ^ EVAL_SEED_SALT;

    let mut log = Vec::new();
    let mut best: Option<(f64, TrainedPolicy)> = None;
    let mut truncated = 0;
    let mut acc = (0.0, 0.0, 0.0, 0usize);
    for ep in 0..cfg.episodes {
        let roll = virtual_rollout(
            transition,
            reward,
            agent.actor(),
            source,
            cfg.rollouts_per_episode,
            cfg.horizon,
            &guard,
            &mut roll_rng,
        )?;
        truncated += roll.truncated;
        for st in &roll.steps {
            let a = ndarray::ArrayView2::from_shape((1, st.a.len()), &st.a)
                .map_err(|e| Error::Usage(e.to_string()))?;
            let a = space.normalize(a);
            buffer.push(
                &st.s,
                a.row(0).as_slice().expect("row-major"),
                st.r,
                &st.s_next,
            )?;
        }
        if buffer.len() >= cfg.batch_size {
            for _ in 0..cfg.grad_steps {
                let batch = buffer.sample(cfg.batch_size, &mut upd_rng)?;
                let expert = (cfg.lambda > 0.0).then(|| {
                    ExpertBatch::from_batch(
                        &space,
                        &source.expert().sample_batch(cfg.batch_size, &mut upd_rng),
                    )
                });
                let stats = agent.update(&batch, expert.as_ref(), &mut upd_rng)?;
                acc.0 += stats.critic_loss;
                acc.1 += stats.actor_loss;
                acc.2 += stats.temperature;
                acc.3 += 1;
            }
        }
        let last = ep + 1 == cfg.episodes;
        if cfg.eval_every > 0 && ((ep + 1) % cfg.eval_every == 0 || last) {
            let snap = agent.snapshot();
            let ev = evaluate_actor(spec, &snap, cfg.eval_episodes.max(1), eval_seed)?;
            let k = acc.3.max(1) as f64;
            log.push(PolicyLogEntry {
                episode: ep + 1,
                buffer_len: buffer.len(),
                eval_mean: ev.mean,
                eval_std: ev.std,
                critic_loss: acc.0 / k,
                actor_loss: acc.1 / k,
                temperature: acc.2 / k,
            });
            acc = (0.0, 0.0, 0.0, 0);
            if best.as_ref().is_none_or(|(b, _)| ev.mean > *b) {
                best = Some((ev.mean, snap));
            }
        }
    }
    let final_policy = agent.snapshot();
    let (best_eval, policy) = match best {
        Some((v, p)) => (Some(v), p),
        None => (None, final_policy.clone()),
    };
    Ok(PolicyOutcome {
        policy,
        final_policy,
        log,
        best_eval,
        buffer_len: buffer.len(),
        truncated_rollouts: truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Quality, Transition};
    use crate::numerics::Normalizer;
    use crate::simulator::SimArch;

    fn setup() -> (Dataset, TransitionModel, RewardModel) {
        let ts = (0..30)
            .map(|i| {
                let x = i as f64 * 0.03 - 0.4;
                Transition::new(
                    vec![x, -x, 0.1 * x, 0.05],
                    vec![0.5, -0.5],
                    vec![x + 0.01, -x, 0.1 * x, 0.06],
                )
            })
            .collect();
        let d = Dataset::new(EnvId::PointMass, Quality::Expert, 4, 2, ts, 0, 0.0).unwrap();
        let arch = SimArch {
            members: 2,
            transition_layers: 2,
            transition_hidden: 8,
            reward_layers: 2,
            reward_hidden: 8,
            ..SimArch::default()
        };
        let mut g = rng::stream(0, 0);
        let t = TransitionModel::new(
            &arch,
            Normalizer::identity(4),
            Normalizer::identity(2),
            vec![0.0; 4],
            &mut g,
        )
        .unwrap();
        let r = RewardModel::new(&arch, Normalizer::identity(4), &mut g).unwrap();
        (d, t, r)
    }

    fn small(algo: Algo) -> PolicyTrainConfig {
        PolicyTrainConfig {
            algo,
            episodes: 12,
            batch_size: 8,
            grad_steps: 2,
            eval_every: 5,
            eval_episodes: 2,
            arch: PolicyArch {
                hidden: 8,
                layers: 2,
                ..PolicyArch::default()
            },
            ..PolicyTrainConfig::default()
        }
    }

    #[test]
    fn buffer_grows_by_k_per_episode() {
        let (d, t, r) = setup();
        let spec = EnvSpec::new(EnvId::PointMass).with_horizon(3);
        let out = train_policy(&small(Algo::Sac), &t, &r, &DataSource::Single(&d), &spec).unwrap();
        assert_eq!(out.truncated_rollouts, 0);
        assert_eq!(out.buffer_len, 12 * 5);
        let capped = PolicyTrainConfig {
            replay_capacity: 7,
            ..small(Algo::Ddpg)
        };
        let out = train_policy(&capped, &t, &r, &DataSource::Single(&d), &spec).unwrap();
        assert_eq!(out.buffer_len, 7);
        assert_eq!(
            out.log.iter().map(|l| l.episode).collect::<Vec<_>>(),
            vec![5, 10, 12]
        );
    }

    #[test]
    fn reproducible_logs() {
        let (d, t, r) = setup();
        let spec = EnvSpec::new(EnvId::PointMass).with_horizon(3);
        for algo in [Algo::Sac, Algo::Ddpg] {
            let a = train_policy(&small(algo), &t, &r, &DataSource::Single(&d), &spec).unwrap();
            let b = train_policy(&small(algo), &t, &r, &DataSource::Single(&d), &spec).unwrap();
            assert_eq!(a.log, b.log);
            assert_eq!(a.policy, b.policy);
        }
    }

    #[test]
    fn env_mismatch_rejected() {
        let (d, t, r) = setup();
        let spec = EnvSpec::new(EnvId::Pendulum);
        assert!(train_policy(&small(Algo::Sac), &t, &r, &DataSource::Single(&d), &spec).is_err());
        assert!("ppo".parse::<Algo>().is_err());
    }
}
