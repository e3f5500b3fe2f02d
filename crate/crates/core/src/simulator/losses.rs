use std::f64::consts::{E, PI};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::models::{RewardModel, TransitionModel};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numerics::MlpGrad;
use crate::rng::{self, Rng64};

/// `β · max(0, E_D[r] + m − E_E[r])`. The sub-gradient at the kink is zero.
pub fn relu_margin_penalty(mean_r_expert: f64, mean_r_diverse: f64, margin: f64, beta: f64) -> f64 {
    beta * (mean_r_diverse + margin - mean_r_expert).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RewardMode {
    /// Expert data only.
    Single,
    /// Expert + diverse data with the soft margin constraint.
    Multi { margin: f64, beta: f64 },
}

/// Noise for one model rollout per batch row: the ensemble member used for
/// the row and its standard-normal draw.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutNoise {
    pub members: Vec<usize>,
    pub noise: Array2<f64>,
}

impl RolloutNoise {
    pub fn draw(rng: &mut Rng64, rows: usize, members: usize, state_dim: usize) -> Self {
        let members = (0..rows).map(|_| rng.random_range(0..members)).collect();
        Self {
            members,
            noise: rng::normal_matrix(rng, rows, state_dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RewardLoss {
    pub loss: f64,
    pub grad: MlpGrad,
    pub mean_rollout: f64,
    pub mean_real: f64,
    pub psi: f64,
    /// Mean reward on the expert rows of the real batch.
    pub mean_expert: f64,
    /// Mean reward on the diverse rows (multi mode only).
    pub mean_diverse: Option<f64>,
    /// Margin penalty (multi mode only).
    pub penalty: Option<f64>,
}

/// Reward objective: model-rollout reward minus real-transition reward plus
/// `½·mean(r²)` over both sets of evaluations, plus the margin penalty in
/// multi mode. Rollouts reuse the batch's `(s, a)`; only `s'` differs.
/// Gradients are with respect to the reward parameters only.
pub fn reward_loss(
    reward: &RewardModel,
    transition: &TransitionModel,
    batch: &Batch,
    noise: &RolloutNoise,
    mode: RewardMode,
) -> Result<RewardLoss> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    if let RewardMode::Multi { .. } = mode {
        if !batch.is_mixed() {
            return Err(Error::Usage(
                "multi-dataset reward loss needs a batch with expert and diverse rows".into(),
            ));
        }
    }
    let model_next = transition.sample_members(
        batch.s.view(),
        batch.a.view(),
        &noise.members,
        noise.noise.view(),
    )?;
    let s_all = concatenate![Axis(0), batch.s.view(), batch.s.view()];
    let next_all = concatenate![Axis(0), model_next.view(), batch.s_next.view()];
    let pass = reward.pass(s_all.view(), next_all.view())?;
    let r = &pass.rewards;
    let nf = n as f64;
    let r_model = r.slice(s![..n]);
    let r_real = r.slice(s![n..]);
    let mean_rollout = r_model.sum() / nf;
    let mean_real = r_real.sum() / nf;
    let psi = 0.5 * r.iter().map(|x| x * x).sum::<f64>() / (2.0 * nf);

    let mut d_r = Array1::zeros(2 * n);
    for i in 0..n {
        d_r[i] = 1.0 / nf + r[i] / (2.0 * nf);
        d_r[n + i] = -1.0 / nf + r[n + i] / (2.0 * nf);
    }

    let n_e = if batch.n_expert == 0 {
        n
    } else {
        batch.n_expert
    };
    let mean_expert = r_real.slice(s![..n_e]).sum() / n_e as f64;
    let (mut loss, mut mean_diverse, mut penalty) = (mean_rollout - mean_real + psi, None, None);
    if let RewardMode::Multi { margin, beta } = mode {
        let n_d = n - n_e;
        let md = r_real.slice(s![n_e..]).sum() / n_d as f64;
        let p = relu_margin_penalty(mean_expert, md, margin, beta);
        if md + margin - mean_expert > 0.0 {
            for i in 0..n_e {
                d_r[n + i] -= beta / n_e as f64;
            }
            for i in n_e..n {
                d_r[n + i] += beta / n_d as f64;
            }
        }
        loss += p;
        mean_diverse = Some(md);
        penalty = Some(p);
    }
    let (grad, _) = reward.backward(&pass, &d_r)?;
    Ok(RewardLoss {
        loss,
        grad,
        mean_rollout,
        mean_real,
        psi,
        mean_expert,
        mean_diverse,
        penalty,
    })
}

/// Mean closed-form entropy of the predicted (normalized) delta
/// distribution over the batch rows and all ensemble members.
pub fn transition_entropy_term(
    transition: &TransitionModel,
    s: ArrayView2<f64>,
    a: ArrayView2<f64>,
) -> Result<f64> {
    let ds = transition.state_dim() as f64;
    let mut total = 0.0;
    for k in 0..transition.num_members() {
        let (_, log_std) = transition.predict(k, s, a)?;
        total += log_std.sum();
    }
    let rows = (s.nrows() * transition.num_members()) as f64;
    Ok(total / rows + 0.5 * ds * (2.0 * PI * E).ln())
}

#[derive(Clone, Debug)]
pub struct TransitionLoss {
    /// Negated objective (what the optimizer minimizes).
    pub loss: f64,
    pub objective: f64,
    pub entropy: f64,
    pub mean_reward: f64,
    pub grads: Vec<MlpGrad>,
}

/// Transition objective `α·H + E[r(s, s'_θ)]` with reparameterized `s'_θ`,
/// evaluated for every member on every row (`noise[k]` is member `k`'s draw).
/// Gradients are with respect to the transition parameters only.
pub fn transition_loss(
    transition: &TransitionModel,
    reward: &RewardModel,
    batch: &Batch,
    noise: &[Array2<f64>],
    alpha: f64,
) -> Result<TransitionLoss> {
    let k_count = transition.num_members();
    let n = batch.len();
    if noise.len() != k_count {
        return Err(Error::dim("transition noise members", k_count, noise.len()));
    }
    if n == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let ds = transition.state_dim();
    let x = transition.inputs(batch.s.view(), batch.a.view())?;
    let mut passes = Vec::with_capacity(k_count);
    let mut nexts = Vec::with_capacity(k_count);
    for (k, eps) in noise.iter().enumerate() {
        if eps.dim() != (n, ds) {
            return Err(Error::dim("transition noise rows", n, eps.nrows()));
        }
        let pass = transition.member_pass(k, x.view())?;
        nexts.push(transition.compose_next(batch.s.view(), &pass.mean, &pass.log_std, eps.view()));
        passes.push(pass);
    }
    let views: Vec<_> = nexts.iter().map(|a| a.view()).collect();
    let next_all = concatenate(Axis(0), &views).map_err(|e| Error::Usage(e.to_string()))?;
    let s_views: Vec<_> = (0..k_count).map(|_| batch.s.view()).collect();
    let s_all = concatenate(Axis(0), &s_views).map_err(|e| Error::Usage(e.to_string()))?;
    let rpass = reward.pass(s_all.view(), next_all.view())?;
    let rows = (k_count * n) as f64;
    let mean_reward = rpass.rewards.sum() / rows;
    let d_r = Array1::from_elem(k_count * n, -1.0 / rows);
    let (_, d_next) = reward.backward(&rpass, &d_r)?;

    let mut log_std_sum = 0.0;
    let mut grads = Vec::with_capacity(k_count);
    for (k, pass) in passes.iter().enumerate() {
        log_std_sum += pass.log_std.sum();
        let mut up = Array2::zeros((n, 2 * ds));
        for i in 0..n {
            for d in 0..ds {
                let g = d_next[[k * n + i, d]] * transition.delta_scale[d];
                up[[i, d]] = g;
                up[[i, ds + d]] = g * pass.log_std[[i, d]].exp() * noise[k][[i, d]] - alpha / rows;
            }
        }
        let (grad, _) = transition.members[k].backward(&pass.tape, up.view())?;
        grads.push(grad);
    }
    let entropy = log_std_sum / rows + 0.5 * ds as f64 * (2.0 * PI * E).ln();
    let objective = alpha * entropy + mean_reward;
    Ok(TransitionLoss {
        loss: -objective,
        objective,
        entropy,
        mean_reward,
        grads,
    })
}

/// Gaussian negative log-likelihood of the observed normalized deltas under
/// every member (mean over rows, summed over dimensions, averaged over
/// members). Used to fit the low-variance comparison model.
pub fn transition_nll_loss(
    transition: &TransitionModel,
    batch: &Batch,
) -> Result<(f64, Vec<MlpGrad>)> {
    let n = batch.len();
    let ds = transition.state_dim();
    let x = transition.inputs(batch.s.view(), batch.a.view())?;
    let mut target = &batch.s_next - &batch.s;
    for mut row in target.rows_mut() {
        for (t, sc) in row.iter_mut().zip(&transition.delta_scale) {
            *t /= sc;
        }
    }
    let k_count = transition.num_members();
    let scale = 1.0 / (n * k_count) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let pass = transition.member_pass(k, x.view())?;
        let mut up = Array2::zeros((n, 2 * ds));
        for i in 0..n {
            for d in 0..ds {
                let l = pass.log_std[[i, d]];
                let z = (target[[i, d]] - pass.mean[[i, d]]) * (-l).exp();
                total += 0.5 * z * z + l + 0.5 * (2.0 * PI).ln();
                up[[i, d]] = -z * (-l).exp() * scale;
                up[[i, ds + d]] = (1.0 - z * z) * scale;
            }
        }
        let (grad, _) = transition.members[k].backward(&pass.tape, up.view())?;
        grads.push(grad);
    }
    Ok((total * scale, grads))
}
