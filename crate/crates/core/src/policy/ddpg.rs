use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::networks::{ActionSpace, CriticPair, DeterministicPolicy, PolicyArch};
use super::replay::ReplayBatch;
use super::sac::{critic_loss, ExpertBatch, UpdateStats};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, MlpGrad};
use crate::rng::Rng64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgHyper {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub lambda: f64,
    /// Exploration noise std in normalized action units.
    pub noise_std: f64,
}

impl Default for DdpgHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr: 1e-3,
            lambda: 1.0,
            noise_std: 0.1,
        }
    }
}

/// `r + γ·min_j Q'_j(s', π'(s'))`.
pub fn ddpg_targets(
    target_actor: &DeterministicPolicy,
    critics: &CriticPair,
    batch: &ReplayBatch,
    gamma: f64,
) -> Result<Array1<f64>> {
    let a_next = target_actor.normalized_actions(batch.s_next.view())?;
    let q = critics.target_min(batch.s_next.view(), a_next.view())?;
    Ok(&batch.r + &(q * gamma))
}

#[derive(Clone, Debug)]
pub struct DdpgActorLoss {
    pub loss: f64,
    pub imitation: Option<f64>,
    pub grad: MlpGrad,
}

/// `−mean Q_1(s, π(s)) + λ·mean ‖π(s_E) − a_E‖²` (normalized action units).
pub fn ddpg_actor_loss(
    actor: &DeterministicPolicy,
    critics: &CriticPair,
    states: ArrayView2<f64>,
    lambda: f64,
    expert: Option<&ExpertBatch>,
) -> Result<DdpgActorLoss> {
    let n = states.nrows() as f64;
    let (a, tape) = actor.pass(states)?;
    let q = critics.pass(0, states, a.view())?;
    let dq = critics.action_grad(0, &q, &Array1::from_elem(states.nrows(), -1.0 / n))?;
    let (mut grad, _) = actor.net.backward(&tape, dq.view())?;
    let mut loss = -q.values.mean().unwrap_or(0.0);
    let mut imitation = None;
    if let Some(e) = expert {
        if e.is_empty() {
            return Err(Error::Config(
                "imitation term needs a non-empty expert batch".into(),
            ));
        }
        let ne = e.len() as f64;
        let (ae, tape_e) = actor.pass(e.s.view())?;
        if ae.dim() != e.a.dim() {
            return Err(Error::dim("expert actions", ae.ncols(), e.a.ncols()));
        }
        let diff: Array2<f64> = &ae - &e.a;
        let value = diff.mapv(|x| x * x).sum() / ne;
        let up = &diff * (2.0 * lambda / ne);
        let (g, _) = actor.net.backward(&tape_e, up.view())?;
        grad.add_assign(&g);
        loss += lambda * value;
        imitation = Some(value);
    }
    Ok(DdpgActorLoss {
        loss,
        imitation,
        grad,
    })
}

#[derive(Clone, Debug)]
pub struct DdpgAgent {
    pub actor: DeterministicPolicy,
    pub target_actor: DeterministicPolicy,
    pub critics: CriticPair,
    pub hyper: DdpgHyper,
    actor_adam: AdamState,
    critic_adam: [AdamState; 2],
}

impl DdpgAgent {
    pub fn new(
        space: ActionSpace,
        arch: &PolicyArch,
        hyper: DdpgHyper,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&hyper.gamma)
            || !(0.0..=1.0).contains(&hyper.tau)
            || hyper.lambda < 0.0
        {
            return Err(Error::Config(
                "need 0 <= gamma < 1, 0 <= tau <= 1 and lambda >= 0".into(),
            ));
        }
        let actor = DeterministicPolicy::new(space.clone(), arch, hyper.noise_std, rng)?;
        let critics = CriticPair::new(&space, arch, rng)?;
        Ok(Self {
            target_actor: actor.clone(),
            actor_adam: AdamState::for_mlp(&actor.net),
            critic_adam: [
                AdamState::for_mlp(&critics.q[0]),
                AdamState::for_mlp(&critics.q[1]),
            ],
            actor,
            critics,
            hyper,
        })
    }

    pub fn update(
        &mut self,
        batch: &ReplayBatch,
        expert: Option<&ExpertBatch>,
    ) -> Result<UpdateStats> {
        let h = self.hyper.clone();
        let y = ddpg_targets(&self.target_actor, &self.critics, batch, h.gamma)?;
        let cl = critic_loss(&self.critics, batch, &y)?;
        if !cl.loss.is_finite() {
            return Err(Error::Numerical(format!("critic loss became {}", cl.loss)));
        }
        for j in 0..2 {
            self.critic_adam[j].step_mlp(&mut self.critics.q[j], &cl.grads[j], h.lr)?;
        }
        let al = ddpg_actor_loss(
            &self.actor,
            &self.critics,
            batch.s.view(),
            h.lambda,
            expert.filter(|_| h.lambda > 0.0),
        )?;
        if !al.loss.is_finite() {
            return Err(Error::Numerical(format!("actor loss became {}", al.loss)));
        }
        self.actor_adam
            .step_mlp(&mut self.actor.net, &al.grad, h.lr)?;
        self.critics.soft_update(h.tau);
        self.target_actor.net.polyak_from(&self.actor.net, h.tau);
        Ok(UpdateStats {
            critic_loss: cl.loss,
            actor_loss: al.loss,
            kl: al.imitation,
            temperature: 0.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvId, EnvSpec};
    use crate::numerics::{finite_diff_check, GradCheckMode, Mlp};
    use crate::rng;

    fn agent(seed: u64) -> DdpgAgent {
        let space = ActionSpace::for_env(&EnvSpec::new(EnvId::PointMass));
        let arch = PolicyArch {
            hidden: 5,
            layers: 3,
            ..PolicyArch::default()
        };
        DdpgAgent::new(
            space,
            &arch,
            DdpgHyper::default(),
            &mut rng::stream(seed, 0),
        )
        .unwrap()
    }

    fn batch(n: usize, seed: u64) -> ReplayBatch {
        let mut g = rng::stream(seed, 1);
        ReplayBatch {
            s: rng::normal_matrix(&mut g, n, 4),
            a: rng::normal_matrix(&mut g, n, 2).mapv(|x: f64| 0.8 * x.tanh()),
            r: rng::normal_matrix(&mut g, n, 1).column(0).to_owned(),
            s_next: rng::normal_matrix(&mut g, n, 4),
        }
    }

    fn with_params(net: &Mlp, p: &[f64]) -> Mlp {
        let mut n = net.clone();
        n.set_flat_params(p).unwrap();
        n
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let a = agent(1);
        let b = batch(5, 1);
        let e = batch(3, 2);
        let e = ExpertBatch { s: e.s, a: e.a };
        for (lambda, ex) in [(0.0, None), (0.8, Some(&e))] {
            let loss = |p: &[f64]| {
                let mut act = a.actor.clone();
                act.net = with_params(&a.actor.net, p);
                let l = ddpg_actor_loss(&act, &a.critics, b.s.view(), lambda, ex).unwrap();
                (l.loss, l.grad.flat())
            };
            let err = finite_diff_check(
                loss,
                &a.actor.net.flat_params(),
                1e-5,
                GradCheckMode::Coordinates,
            )
            .unwrap();
            assert!(err < 1e-4, "lambda {lambda}: {err}");
        }
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let a = agent(2);
        let b = batch(5, 3);
        let y = ddpg_targets(&a.target_actor, &a.critics, &b, 0.9).unwrap();
        let loss = |p: &[f64]| {
            let mut c = a.critics.clone();
            c.q[1] = with_params(&a.critics.q[1], p);
            let l = critic_loss(&c, &b, &y).unwrap();
            (l.loss, l.grads[1].flat())
        };
        let err = finite_diff_check(
            loss,
            &a.critics.q[1].flat_params(),
            1e-5,
            GradCheckMode::Coordinates,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_discount_target_is_reward() {
        let a = agent(3);
        let b = batch(4, 4);
        assert_eq!(
            ddpg_targets(&a.target_actor, &a.critics, &b, 0.0).unwrap(),
            b.r
        );
    }

    #[test]
    fn dominant_imitation_reduces_error() {
        let mut a = agent(4);
        a.hyper.lambda = 1e4;
        let b = batch(16, 5);
        let e = ExpertBatch {
            s: b.s.clone(),
            a: b.a.clone(),
        };
        let err = |a: &DdpgAgent| {
            ddpg_actor_loss(&a.actor, &a.critics, b.s.view(), 1.0, Some(&e))
                .unwrap()
                .imitation
                .unwrap()
        };
        let mut last = err(&a);
        for _ in 0..20 {
            a.update(&b, Some(&e)).unwrap();
            let now = err(&a);
            assert!(now < last, "{now} >= {last}");
            last = now;
        }
    }
}
