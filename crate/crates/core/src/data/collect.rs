use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::{Dataset, Quality, Transition};
use crate::envs::{self, EnvSpec};
use crate::error::{Error, Result};
use crate::policy::{
    evaluate_actor, ActMode, ActionSpace, Actor, GaussianPolicy, PolicyArch, RandomActor,
    ReplayBuffer, SacAgent, SacHyper,
};
use crate::rng;

const AGENT_STREAM: u64 = 0xB0_0001;
const ACT_STREAM: u64 = 0xB0_0002;
const UPDATE_STREAM: u64 = 0xB0_0003;
const RESET_BASE: u64 = 0xB1_0000;
const COLLECT_ACT_STREAM: u64 = 0xC0_0001;
const COLLECT_RESET_BASE: u64 = 0xC1_0000;
const EVAL_SALT: u64 = 0xBE_4A11;

/// SAC on the true environment, used only to produce behavior policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub episodes: usize,
    /// Uniform-random environment steps before the policy acts.
    pub warmup_steps: usize,
    pub checkpoint_every: usize,
    pub eval_episodes: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub seed: u64,
    pub arch: PolicyArch,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            episodes: 60,
            warmup_steps: 1000,
            checkpoint_every: 20,
            eval_episodes: 10,
            batch_size: 256,
            gamma: 0.99,
            tau: 0.005,
            lr: 1e-3,
            seed: 0,
            arch: PolicyArch::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorCheckpoint {
    /// Training episodes completed when the snapshot was taken.
    pub episode: usize,
    pub eval_return: f64,
    pub policy: GaussianPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorSuite {
    pub expert: BehaviorCheckpoint,
    pub medium: BehaviorCheckpoint,
    pub random_return: f64,
    pub checkpoints: Vec<BehaviorCheckpoint>,
}

impl BehaviorSuite {
    /// `(R − R_random) / (R_expert − R_random)`.
    pub fn normalized(&self, ret: f64) -> f64 {
        normalized_score(ret, self.random_return, self.expert.eval_return)
    }
}

pub(crate) fn normalized_score(ret: f64, random: f64, expert: f64) -> f64 {
    (ret - random) / (expert - random)
}

/// Trains SAC with the true reward and snapshots it every
/// `checkpoint_every` episodes. The expert is the final snapshot; the medium
/// policy is the earliest snapshot whose normalized score lies in `[0.5, 1)`.
pub fn train_behavior_suite(spec: &EnvSpec, cfg: &BehaviorConfig) -> Result<BehaviorSuite> {
    if cfg.episodes == 0 || cfg.checkpoint_every == 0 || cfg.eval_episodes == 0 {
        return Err(Error::Config(
            "behavior episodes, checkpoint cadence and eval episodes must be >= 1".into(),
        ));
    }
    let space = ActionSpace::for_env(spec);
    let hyper = SacHyper {
        gamma: cfg.gamma,
        tau: cfg.tau,
        lr: cfg.lr,
        lambda: 0.0,
        ..SacHyper::default()
    };
    let mut agent = SacAgent::new(
        space.clone(),
        &cfg.arch,
        hyper,
        &mut rng::stream(cfg.seed, AGENT_STREAM),
    )?;
    let capacity = cfg.episodes * spec.horizon;
    let mut buffer = ReplayBuffer::new(capacity.max(1), spec.state_dim, spec.action_dim)?;
    let mut act_rng = rng::stream(cfg.seed, ACT_STREAM);
    let mut upd_rng = rng::stream(cfg.seed, UPDATE_STREAM);
    let random = RandomActor { spec: spec.clone() };
    let eval_seed = cfg.seed ^ EVAL_SALT;

    let mut checkpoints = Vec::new();
    let mut total_steps = 0;
    for ep in 0..cfg.episodes {
        let mut state = envs::reset_with(spec, &mut rng::stream(cfg.seed, RESET_BASE + ep as u64));
        for _ in 0..spec.horizon {
            let obs = envs::observe(spec, &state);
            let view = ArrayView2::from_shape((1, obs.len()), &obs)
                .map_err(|e| Error::Usage(e.to_string()))?;
            let actor: &dyn Actor = if total_steps < cfg.warmup_steps {
                &random
            } else {
                &agent.policy
            };
            let action = actor.act(view, ActMode::Explore, &mut act_rng)?;
            let out = envs::step(spec, &state, action.row(0).as_slice().expect("row-major"))?;
            let next = envs::observe(spec, &out.next);
            let a = space.normalize(action.view());
            buffer.push(
                &obs,
                a.row(0).as_slice().expect("row-major"),
                out.true_reward,
                &next,
            )?;
            state = out.next;
            total_steps += 1;
            if buffer.len() >= cfg.batch_size {
                let batch = buffer.sample(cfg.batch_size, &mut upd_rng)?;
                agent.update(&batch, None, &mut upd_rng)?;
            }
        }
        if (ep + 1) % cfg.checkpoint_every == 0 || ep + 1 == cfg.episodes {
            let ev = evaluate_actor(spec, &agent.policy, cfg.eval_episodes, eval_seed)?;
            checkpoints.push(BehaviorCheckpoint {
                episode: ep + 1,
                eval_return: ev.mean,
                policy: agent.policy.clone(),
            });
        }
    }
    let random_return = evaluate_actor(spec, &random, cfg.eval_episodes, eval_seed)?.mean;
    let expert = checkpoints
        .last()
        .cloned()
        .expect("at least one checkpoint");
    if expert.eval_return <= random_return {
        return Err(Error::Behavior(format!(
            "{} expert return {:.3} does not beat the random policy ({:.3})",
            spec.id, expert.eval_return, random_return
        )));
    }
    let medium = checkpoints
        .iter()
        .find(|c| (0.5..1.0).contains(&normalized_score(c.eval_return, random_return, expert.eval_return)))
        .cloned()
        .ok_or_else(|| {
            Error::Behavior(format!(
                "no {} checkpoint reached half of the expert's normalized return; medium tier aborted",
                spec.id
            ))
        })?;
    Ok(BehaviorSuite {
        expert,
        medium,
        random_return,
        checkpoints,
    })
}

/// Rolls full episodes of `actor` (sampled actions) in the true environment
/// until `n` transitions are recorded. The generator return is the mean
/// return of the completed episodes, or of the partial one when none finished.
pub fn collect_dataset(
    spec: &EnvSpec,
    actor: &dyn Actor,
    quality: Quality,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    if actor.state_dim() != spec.state_dim || actor.action_dim() != spec.action_dim {
        return Err(Error::dim(
            "collecting policy",
            spec.state_dim,
            actor.state_dim(),
        ));
    }
    let mut act_rng = rng::stream(seed, COLLECT_ACT_STREAM);
    let mut transitions = Vec::with_capacity(n);
    let mut returns = Vec::new();
    let mut partial = 0.0;
    let mut episode = 0u64;
    while transitions.len() < n {
        let mut state =
            envs::reset_with(spec, &mut rng::stream(seed, COLLECT_RESET_BASE + episode));
        episode += 1;
        partial = 0.0;
        for _ in 0..spec.horizon {
            if transitions.len() == n {
                break;
            }
            let obs = envs::observe(spec, &state);
            let view = ArrayView2::from_shape((1, obs.len()), &obs)
                .map_err(|e| Error::Usage(e.to_string()))?;
            let action = actor.act(view, ActMode::Explore, &mut act_rng)?;
            let action = spec.clip_action(action.row(0).as_slice().expect("row-major"));
            let out = envs::step(spec, &state, &action)?;
            partial += out.true_reward;
            transitions.push(
                Transition::new(obs, action, envs::observe(spec, &out.next))
                    .with_true_reward(out.true_reward),
            );
            state = out.next;
            if out.done {
                returns.push(partial);
                break;
            }
        }
    }
    let generator_return = if returns.is_empty() {
        partial
    } else {
        returns.iter().sum::<f64>() / returns.len() as f64
    };
    Dataset::new(
        spec.id,
        quality,
        spec.state_dim,
        spec.action_dim,
        transitions,
        seed,
        generator_return,
    )
}

/// Random-tier dataset.
pub fn collect_random(spec: &EnvSpec, n: usize, seed: u64) -> Result<Dataset> {
    collect_dataset(
        spec,
        &RandomActor { spec: spec.clone() },
        Quality::Random,
        n,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvId;

    #[test]
    fn exact_count_and_replay_consistency() {
        let spec = EnvSpec::new(EnvId::Pendulum).with_horizon(30);
        let d = collect_random(&spec, 100, 3).unwrap();
        assert_eq!(d.len(), 100);
        for t in d.transitions() {
            let st = envs::state_from_observation(&spec, &t.s).unwrap();
            let out = envs::step(&spec, &st, &t.a).unwrap();
            let want = envs::observe(&spec, &out.next);
            for (x, y) in want.iter().zip(&t.s_next) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!((t.diagnostic_true_reward().unwrap() - out.true_reward).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_size_rejected() {
        let spec = EnvSpec::new(EnvId::PointMass);
        assert!(collect_random(&spec, 0, 0).is_err());
    }

    #[test]
    fn episodes_restart_at_horizon() {
        let spec = EnvSpec::new(EnvId::PointMass).with_horizon(5);
        let d = collect_random(&spec, 12, 1).unwrap();
        let ts = d.transitions();
        for i in [5, 10] {
            assert_eq!(&ts[i].s[2..], &[0.0, 0.0]);
        }
        assert_ne!(ts[4].s_next, ts[5].s);
    }
}
