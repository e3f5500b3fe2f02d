use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::networks::{pre_tanh_of, ActionSpace, CriticPair, GaussianPolicy, PolicyArch};
use super::replay::ReplayBatch;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numerics::{squash_correction_grad, AdamState, MlpGrad};
use crate::rng::{self, Rng64};

/// Expert states with their actions in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBatch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
}

impl ExpertBatch {
    pub fn from_batch(space: &ActionSpace, batch: &Batch) -> Self {
        Self {
            s: batch.s.clone(),
            a: space.normalize(batch.a.view()),
        }
    }

    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.nrows() == 0
    }
}

#[derive(Clone, Debug)]
pub struct KlTerm {
    pub value: f64,
    pub grad: MlpGrad,
}

/// Expert-action negative log-likelihood under the policy. This is the
/// policy-dependent part of `KL(π_E ‖ π)`; its gradient is the BC gradient.
pub fn kl_regularizer(policy: &GaussianPolicy, expert: &ExpertBatch) -> Result<KlTerm> {
    let n = expert.len();
    if n == 0 {
        return Err(Error::Config(
            "KL regularizer needs a non-empty expert batch".into(),
        ));
    }
    let pass = policy.pass(expert.s.view())?;
    if expert.a.dim() != pass.mean.dim() {
        return Err(Error::dim(
            "expert actions",
            pass.mean.ncols(),
            expert.a.ncols(),
        ));
    }
    let u = pre_tanh_of(expert.a.view());
    let sigma = pass.log_std.mapv(f64::exp);
    let z = (&u - &pass.mean) / &sigma;
    let value = -GaussianPolicy::squash(&pass, z.view()).log_prob.sum() / n as f64;
    let da = pass.mean.ncols();
    let nf = n as f64;
    let mut up = Array2::zeros((n, 2 * da));
    for i in 0..n {
        for d in 0..da {
            let zz = z[[i, d]];
            up[[i, d]] = -zz / sigma[[i, d]] / nf;
            up[[i, da + d]] = (1.0 - zz * zz) / nf;
        }
    }
    let (grad, _) = policy.net.backward(&pass.tape, up.view())?;
    Ok(KlTerm { value, grad })
}

#[derive(Clone, Debug)]
pub struct CriticLoss {
    pub loss: f64,
    pub grads: [MlpGrad; 2],
}

/// `Σ_j ½·mean((Q_j(s, a) − y)²)` for fixed targets `y`.
pub fn critic_loss(
    critics: &CriticPair,
    batch: &ReplayBatch,
    targets: &Array1<f64>,
) -> Result<CriticLoss> {
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(2);
    for j in 0..2 {
        let pass = critics.pass(j, batch.s.view(), batch.a.view())?;
        let diff = &pass.values - targets;
        loss += 0.5 * diff.mapv(|x| x * x).sum() / n;
        let up = (diff / n).insert_axis(Axis(1));
        grads.push(critics.q[j].backward(&pass.tape, up.view())?.0);
    }
    let g1 = grads.pop().expect("two critics");
    let g0 = grads.pop().expect("two critics");
    Ok(CriticLoss {
        loss,
        grads: [g0, g1],
    })
}

/// Soft Bellman targets `r + γ·(min_j Q'_j(s', a') − temperature·log π(a'|s'))`
/// with `a'` drawn from the current policy using `noise`.
pub fn sac_targets(
    policy: &GaussianPolicy,
    critics: &CriticPair,
    temperature: f64,
    batch: &ReplayBatch,
    gamma: f64,
    noise: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    let next = policy.sample(batch.s_next.view(), noise)?;
    let q = critics.target_min(batch.s_next.view(), next.action.view())?;
    Ok(&batch.r + &((q - &(next.log_prob * temperature)) * gamma))
}

#[derive(Clone, Debug)]
pub struct ActorLoss {
    pub loss: f64,
    /// `mean(temperature·log π − min Q)`.
    pub sac_term: f64,
    pub kl: Option<f64>,
    pub grad: MlpGrad,
    pub log_prob: Array1<f64>,
}

/// Reparameterized SAC actor loss plus `λ·kl_regularizer` when an expert
/// batch is supplied.
pub fn sac_actor_loss(
    policy: &GaussianPolicy,
    critics: &CriticPair,
    temperature: f64,
    states: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    lambda: f64,
    expert: Option<&ExpertBatch>,
) -> Result<ActorLoss> {
    let pass = policy.pass(states)?;
    if noise.dim() != pass.mean.dim() {
        return Err(Error::dim("actor noise", pass.mean.ncols(), noise.ncols()));
    }
    let sample = GaussianPolicy::squash(&pass, noise);
    let n = states.nrows();
    let nf = n as f64;
    let q0 = critics.pass(0, states, sample.action.view())?;
    let q1 = critics.pass(1, states, sample.action.view())?;
    let pick0: Array1<f64> = q0
        .values
        .iter()
        .zip(&q1.values)
        .map(|(a, b)| if a <= b { 1.0 } else { 0.0 })
        .collect();
    let q_min: Array1<f64> = q0
        .values
        .iter()
        .zip(&q1.values)
        .map(|(a, b)| a.min(*b))
        .collect();
    let d_q = critics.action_grad(0, &q0, &pick0)?
        + critics.action_grad(1, &q1, &pick0.mapv(|p| 1.0 - p))?;

    let da = pass.mean.ncols();
    let mut up = Array2::zeros((n, 2 * da));
    for i in 0..n {
        for d in 0..da {
            let t = sample.action[[i, d]];
            let s2 = 1.0 - t * t;
            let c = -squash_correction_grad(sample.pre_tanh[[i, d]]);
            let se = pass.log_std[[i, d]].exp() * noise[[i, d]];
            let g_a = d_q[[i, d]] * s2;
            up[[i, d]] = (temperature * c - g_a) / nf;
            up[[i, da + d]] = (temperature * (-1.0 + c * se) - g_a * se) / nf;
        }
    }
    let (mut grad, _) = policy.net.backward(&pass.tape, up.view())?;
    let sac_term = (&sample.log_prob * temperature - &q_min).sum() / nf;
    let mut loss = sac_term;
    let mut kl = None;
    if let Some(e) = expert {
        let term = kl_regularizer(policy, e)?;
        let mut g = term.grad;
        g.scale(lambda);
        grad.add_assign(&g);
        loss += lambda * term.value;
        kl = Some(term.value);
    }
    Ok(ActorLoss {
        loss,
        sac_term,
        kl,
        grad,
        log_prob: sample.log_prob,
    })
}

/// Gradient of `−mean(log_temp · (log π + target))` with respect to `log_temp`.
pub fn temperature_grad(log_prob: &Array1<f64>, target_entropy: f64) -> f64 {
    -log_prob
        .mapv(|lp| lp + target_entropy)
        .mean()
        .unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacHyper {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub lambda: f64,
    pub init_temperature: f64,
    pub auto_temperature: bool,
    /// Defaults to `-action_dim` when absent.
    pub target_entropy: Option<f64>,
}

impl Default for SacHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr: 1e-3,
            lambda: 1.0,
            init_temperature: 1.0,
            auto_temperature: true,
            target_entropy: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub kl: Option<f64>,
    pub temperature: f64,
}

/// Policy, critics, temperature and their optimizer states.
#[derive(Clone, Debug)]
pub struct SacAgent {
    pub policy: GaussianPolicy,
    pub critics: CriticPair,
    pub log_temperature: f64,
    pub hyper: SacHyper,
    policy_adam: AdamState,
    critic_adam: [AdamState; 2],
    temp_adam: AdamState,
}

impl SacAgent {
    pub fn new(
        space: ActionSpace,
        arch: &PolicyArch,
        hyper: SacHyper,
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
        if !(hyper.init_temperature > 0.0) {
            return Err(Error::Config("initial temperature must be > 0".into()));
        }
        let policy = GaussianPolicy::new(space.clone(), arch, rng)?;
        let critics = CriticPair::new(&space, arch, rng)?;
        Ok(Self {
            policy_adam: AdamState::for_mlp(&policy.net),
            critic_adam: [
                AdamState::for_mlp(&critics.q[0]),
                AdamState::for_mlp(&critics.q[1]),
            ],
            temp_adam: AdamState::new(1),
            log_temperature: hyper.init_temperature.ln(),
            policy,
            critics,
            hyper,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.hyper
            .target_entropy
            .unwrap_or(-(self.policy.space.action_dim() as f64))
    }

    /// One update with fresh noise from `rng`.
    pub fn update(
        &mut self,
        batch: &ReplayBatch,
        expert: Option<&ExpertBatch>,
        rng: &mut Rng64,
    ) -> Result<UpdateStats> {
        let da = self.policy.space.action_dim();
        let next_noise = rng::normal_matrix(rng, batch.len(), da);
        let actor_noise = rng::normal_matrix(rng, batch.len(), da);
        self.update_with_noise(batch, expert, next_noise.view(), actor_noise.view())
    }

    /// Critic step, actor step, temperature step, then Polyak averaging.
    pub fn update_with_noise(
        &mut self,
        batch: &ReplayBatch,
        expert: Option<&ExpertBatch>,
        next_noise: ArrayView2<f64>,
        actor_noise: ArrayView2<f64>,
    ) -> Result<UpdateStats> {
        let h = self.hyper.clone();
        let temp = self.temperature();
        let y = sac_targets(
            &self.policy,
            &self.critics,
            temp,
            batch,
            h.gamma,
            next_noise,
        )?;
        let cl = critic_loss(&self.critics, batch, &y)?;
        if !cl.loss.is_finite() {
            return Err(Error::Numerical(format!("critic loss became {}", cl.loss)));
        }
        for j in 0..2 {
            self.critic_adam[j].step_mlp(&mut self.critics.q[j], &cl.grads[j], h.lr)?;
        }
        let al = sac_actor_loss(
            &self.policy,
            &self.critics,
            temp,
            batch.s.view(),
            actor_noise,
            h.lambda,
            expert.filter(|_| h.lambda > 0.0),
        )?;
        if !al.loss.is_finite() {
            return Err(Error::Numerical(format!("actor loss became {}", al.loss)));
        }
        self.policy_adam
            .step_mlp(&mut self.policy.net, &al.grad, h.lr)?;
        if h.auto_temperature {
            let g = temperature_grad(&al.log_prob, self.target_entropy());
            let mut p = [self.log_temperature];
            self.temp_adam.step(&mut p, &[g], h.lr)?;
            self.log_temperature = p[0];
        }
        self.critics.soft_update(h.tau);
        Ok(UpdateStats {
            critic_loss: cl.loss,
            actor_loss: al.loss,
            kl: al.kl,
            temperature: self.temperature(),
        })
    }
}
