use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use super::{layer_sizes, SimArch};
use crate::checkpoint::Checkpoint;
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::numerics::{Head, Mlp, MlpGrad, MlpTape, Normalizer, LOG_STD_MAX, LOG_STD_MIN};
use crate::rng::Rng64;

pub(crate) const GAUSSIAN_HEAD: Head = Head::Gaussian {
    log_std_min: LOG_STD_MIN,
    log_std_max: LOG_STD_MAX,
};

/// Ensemble of Gaussian dynamics models over the normalized state delta.
///
/// Inputs are normalized with frozen state/action statistics. Each member
/// outputs mean and log-std of `Δ̂`, and `s' = s + delta_scale ⊙ Δ̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionModel {
    pub members: Vec<Mlp>,
    pub state_norm: Normalizer,
    pub action_norm: Normalizer,
    pub delta_scale: Vec<f64>,
}

/// Per-member forward pass intermediates.
pub(crate) struct MemberPass {
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    pub tape: MlpTape,
}

impl TransitionModel {
    /// Members get independent random weights; the mean rows of each final
    /// layer start at zero so the initial model predicts `s' ≈ s`.
    pub fn new(
        arch: &SimArch,
        state_norm: Normalizer,
        action_norm: Normalizer,
        delta_scale: Vec<f64>,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if arch.members == 0 {
            return Err(Error::Config(
                "transition ensemble needs at least one member".into(),
            ));
        }
        let ds = state_norm.dim();
        if delta_scale.len() != ds {
            return Err(Error::dim("delta scale", ds, delta_scale.len()));
        }
        let sizes = layer_sizes(
            ds + action_norm.dim(),
            arch.transition_hidden,
            arch.transition_layers,
            2 * ds,
        );
        let mut members = Vec::with_capacity(arch.members);
        for _ in 0..arch.members {
            let mut net = Mlp::new(&sizes, arch.activation, GAUSSIAN_HEAD, rng)?;
            let last = net.layers.last_mut().expect("non-empty");
            last.weight.slice_mut(s![..ds, ..]).fill(0.0);
            last.bias.slice_mut(s![..ds]).fill(0.0);
            net.touch();
            members.push(net);
        }
        Ok(Self {
            members,
            state_norm,
            action_norm,
            delta_scale,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_norm.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_norm.dim()
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub(crate) fn inputs(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        if s.ncols() != self.state_dim() {
            return Err(Error::dim(
                "transition state input",
                self.state_dim(),
                s.ncols(),
            ));
        }
        if a.ncols() != self.action_dim() || a.nrows() != s.nrows() {
            return Err(Error::dim(
                "transition action input",
                self.action_dim(),
                a.ncols(),
            ));
        }
        Ok(concatenate![
            Axis(1),
            self.state_norm.apply(s),
            self.action_norm.apply(a)
        ])
    }

    pub(crate) fn member_pass(&self, k: usize, inputs: ArrayView2<f64>) -> Result<MemberPass> {
        let ds = self.state_dim();
        let (out, tape) = self.member(k)?.forward(inputs)?;
        Ok(MemberPass {
            mean: out.slice(s![.., ..ds]).to_owned(),
            log_std: out.slice(s![.., ds..]).to_owned(),
            tape,
        })
    }

    fn member(&self, k: usize) -> Result<&Mlp> {
        self.members.get(k).ok_or_else(|| {
            Error::Usage(format!(
                "ensemble member {k} out of range ({})",
                self.members.len()
            ))
        })
    }

    /// Normalized-space mean and log-std of member `k` for a batch.
    pub fn predict(
        &self,
        k: usize,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let x = self.inputs(s, a)?;
        let out = self.member(k)?.predict(x.view())?;
        let ds = self.state_dim();
        Ok((
            out.slice(s![.., ..ds]).to_owned(),
            out.slice(s![.., ds..]).to_owned(),
        ))
    }

    /// `s' = s + delta_scale ⊙ (mean + exp(log_std) ⊙ noise)` for member `k`.
    pub fn sample(
        &self,
        k: usize,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        noise: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        if noise.dim() != s.dim() {
            return Err(Error::dim("transition noise", s.ncols(), noise.ncols()));
        }
        let (mean, log_std) = self.predict(k, s, a)?;
        Ok(self.compose_next(s, &mean, &log_std, noise))
    }

    pub(crate) fn compose_next(
        &self,
        s: ArrayView2<f64>,
        mean: &Array2<f64>,
        log_std: &Array2<f64>,
        noise: ArrayView2<f64>,
    ) -> Array2<f64> {
        let mut next = s.to_owned();
        for i in 0..next.nrows() {
            for d in 0..next.ncols() {
                let delta = mean[[i, d]] + log_std[[i, d]].exp() * noise[[i, d]];
                next[[i, d]] += self.delta_scale[d] * delta;
            }
        }
        next
    }

    /// Samples row `i` from member `members[i]`.
    pub fn sample_members(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        members: &[usize],
        noise: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        if members.len() != s.nrows() || noise.dim() != s.dim() {
            return Err(Error::dim(
                "per-row member assignment",
                s.nrows(),
                members.len(),
            ));
        }
        let mut next = Array2::zeros(s.raw_dim());
        for k in 0..self.num_members() {
            let rows: Vec<usize> = (0..members.len()).filter(|&i| members[i] == k).collect();
            if rows.is_empty() {
                continue;
            }
            let sk = s.select(Axis(0), &rows);
            let ak = a.select(Axis(0), &rows);
            let nk = noise.select(Axis(0), &rows);
            let out = self.sample(k, sk.view(), ak.view(), nk.view())?;
            for (j, &i) in rows.iter().enumerate() {
                next.row_mut(i).assign(&out.row(j));
            }
        }
        if members.iter().any(|&k| k >= self.num_members()) {
            return Err(Error::Usage("ensemble member index out of range".into()));
        }
        Ok(next)
    }

    /// Single-sample convenience wrapper around [`TransitionModel::sample`].
    pub fn transition_sample(
        &self,
        k: usize,
        s: &[f64],
        a: &[f64],
        noise: &[f64],
    ) -> Result<Vec<f64>> {
        let sv =
            ArrayView2::from_shape((1, s.len()), s).map_err(|e| Error::Usage(e.to_string()))?;
        let av =
            ArrayView2::from_shape((1, a.len()), a).map_err(|e| Error::Usage(e.to_string()))?;
        let nv = ArrayView2::from_shape((1, noise.len()), noise)
            .map_err(|e| Error::Usage(e.to_string()))?;
        Ok(self.sample(k, sv, av, nv)?.into_raw_vec_and_offset().0)
    }

    /// Mean predicted standard deviation of `s'` (denormalized), averaged
    /// over members, rows and dimensions.
    pub fn mean_predicted_std(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<f64> {
        let mut total = 0.0;
        for k in 0..self.num_members() {
            let (_, log_std) = self.predict(k, s, a)?;
            for row in log_std.rows() {
                total += row
                    .iter()
                    .zip(&self.delta_scale)
                    .map(|(l, sc)| l.exp() * sc)
                    .sum::<f64>();
            }
        }
        Ok(total / (self.num_members() * s.nrows().max(1) * self.state_dim()) as f64)
    }

    pub fn to_checkpoint(&self, env: EnvId, config: serde_json::Value) -> Checkpoint {
        let mut norm = BTreeMap::new();
        norm.insert("state_mean".into(), self.state_norm.mean.clone());
        norm.insert("state_std".into(), self.state_norm.std.clone());
        norm.insert("action_mean".into(), self.action_norm.mean.clone());
        norm.insert("action_std".into(), self.action_norm.std.clone());
        norm.insert("delta_scale".into(), self.delta_scale.clone());
        Checkpoint::new(
            "transition",
            env,
            self.state_dim(),
            self.action_dim(),
            self.members.clone(),
            norm,
            config,
        )
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("transition")?;
        let model = Self {
            members: c.nets.clone(),
            state_norm: Normalizer {
                mean: c.norm("state_mean")?,
                std: c.norm("state_std")?,
            },
            action_norm: Normalizer {
                mean: c.norm("action_mean")?,
                std: c.norm("action_std")?,
            },
            delta_scale: c.norm("delta_scale")?,
        };
        let ds = model.state_dim();
        if ds != c.header.state_dim || model.action_dim() != c.header.action_dim {
            return Err(Error::dim(
                "transition checkpoint state",
                c.header.state_dim,
                ds,
            ));
        }
        for m in &model.members {
            if m.input_dim() != ds + model.action_dim() || m.output_dim() != 2 * ds {
                return Err(Error::dim(
                    "transition member input",
                    ds + model.action_dim(),
                    m.input_dim(),
                ));
            }
        }
        Ok(model)
    }
}

/// Bounded reward `r(s, s') = tanh(f([ŝ, ŝ']))` over normalized states.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub net: Mlp,
    pub state_norm: Normalizer,
}

/// Intermediates of a batched reward evaluation.
pub(crate) struct RewardPass {
    pub rewards: Array1<f64>,
    pub tape: MlpTape,
}

impl RewardModel {
    pub fn new(arch: &SimArch, state_norm: Normalizer, rng: &mut Rng64) -> Result<Self> {
        let ds = state_norm.dim();
        let sizes = layer_sizes(2 * ds, arch.reward_hidden, arch.reward_layers, 1);
        Ok(Self {
            net: Mlp::new(&sizes, arch.activation, Head::Tanh, rng)?,
            state_norm,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_norm.dim()
    }

    fn inputs(&self, s: ArrayView2<f64>, s_next: ArrayView2<f64>) -> Result<Array2<f64>> {
        let ds = self.state_dim();
        if s.ncols() != ds || s_next.ncols() != ds {
            return Err(Error::dim(
                "reward state input",
                ds,
                s.ncols().max(s_next.ncols()),
            ));
        }
        if s.nrows() != s_next.nrows() {
            return Err(Error::dim("reward batch rows", s.nrows(), s_next.nrows()));
        }
        Ok(concatenate![
            Axis(1),
            self.state_norm.apply(s),
            self.state_norm.apply(s_next)
        ])
    }

    pub fn rewards(&self, s: ArrayView2<f64>, s_next: ArrayView2<f64>) -> Result<Array1<f64>> {
        let x = self.inputs(s, s_next)?;
        Ok(self.net.predict(x.view())?.column(0).to_owned())
    }

    pub fn reward_forward(&self, s: &[f64], s_next: &[f64]) -> Result<f64> {
        let sv =
            ArrayView2::from_shape((1, s.len()), s).map_err(|e| Error::Usage(e.to_string()))?;
        let nv = ArrayView2::from_shape((1, s_next.len()), s_next)
            .map_err(|e| Error::Usage(e.to_string()))?;
        Ok(self.rewards(sv, nv)?[0])
    }

    pub(crate) fn pass(&self, s: ArrayView2<f64>, s_next: ArrayView2<f64>) -> Result<RewardPass> {
        let x = self.inputs(s, s_next)?;
        let (out, tape) = self.net.forward(x.view())?;
        Ok(RewardPass {
            rewards: out.column(0).to_owned(),
            tape,
        })
    }

    /// Backpropagates per-row `∂L/∂r`, returning the parameter gradient and
    /// `∂L/∂s'` in raw (denormalized) state units.
    pub(crate) fn backward(
        &self,
        pass: &RewardPass,
        d_reward: &Array1<f64>,
    ) -> Result<(MlpGrad, Array2<f64>)> {
        let upstream = d_reward.view().insert_axis(Axis(1));
        let (grad, d_input) = self.net.backward(&pass.tape, upstream)?;
        let ds = self.state_dim();
        let mut d_next = d_input.slice(s![.., ds..]).to_owned();
        for mut row in d_next.rows_mut() {
            for (g, sd) in row.iter_mut().zip(&self.state_norm.std) {
                *g /= sd;
            }
        }
        Ok((grad, d_next))
    }

    /// Digest of the exact parameter bits.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for x in self
            .net
            .flat_params()
            .iter()
            .chain(&self.state_norm.mean)
            .chain(&self.state_norm.std)
        {
            h.update(x.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(
        &self,
        env: EnvId,
        action_dim: usize,
        config: serde_json::Value,
    ) -> Checkpoint {
        let mut norm = BTreeMap::new();
        norm.insert("state_mean".into(), self.state_norm.mean.clone());
        norm.insert("state_std".into(), self.state_norm.std.clone());
        Checkpoint::new(
            "reward",
            env,
            self.state_dim(),
            action_dim,
            vec![self.net.clone()],
            norm,
            config,
        )
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("reward")?;
        let net = c
            .nets
            .first()
            .cloned()
            .ok_or_else(|| Error::Config("reward checkpoint has no network".into()))?;
        let model = Self {
            net,
            state_norm: Normalizer {
                mean: c.norm("state_mean")?,
                std: c.norm("state_std")?,
            },
        };
        if model.net.input_dim() != 2 * model.state_dim() || model.state_dim() != c.header.state_dim
        {
            return Err(Error::dim(
                "reward checkpoint input",
                2 * c.header.state_dim,
                model.net.input_dim(),
            ));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, GradCheckMode};
    use crate::rng;
    use ndarray::array;

    fn arch() -> SimArch {
        SimArch {
            members: 3,
            transition_layers: 3,
            transition_hidden: 8,
            reward_layers: 3,
            reward_hidden: 8,
            ..SimArch::default()
        }
    }

    fn model(seed: u64) -> TransitionModel {
        TransitionModel::new(
            &arch(),
            Normalizer {
                mean: vec![0.2, -0.1],
                std: vec![0.5, 2.0],
            },
            Normalizer::identity(1),
            vec![1.0, 1.0],
            &mut rng::stream(seed, 0),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_adds_mean_delta() {
        let m = model(1);
        let s = [0.3, 0.4];
        let a = [0.5];
        let (mean, _) = m
            .predict(0, array![[0.3, 0.4]].view(), array![[0.5]].view())
            .unwrap();
        assert!(mean.iter().all(|&x| x == 0.0));
        let next = m.transition_sample(0, &s, &a, &[0.0, 0.0]).unwrap();
        assert_eq!(next, s.to_vec());
    }

    #[test]
    fn zeroed_member_is_identity() {
        let mut m = model(2);
        m.members[1].zero_last_layer();
        let s = [1.5, -2.5];
        assert_eq!(
            m.transition_sample(1, &s, &[0.1], &[0.0, 0.0]).unwrap(),
            s.to_vec()
        );
        let (_, log_std) = m
            .predict(1, array![[1.5, -2.5]].view(), array![[0.1]].view())
            .unwrap();
        assert!(log_std.iter().all(|&l| (l + 2.0).abs() < 1e-12));
    }

    #[test]
    fn empirical_std_matches_log_std() {
        let m = model(3);
        let n = 10_000;
        let s = Array2::from_shape_fn((n, 2), |(_, j)| [0.3, 0.4][j]);
        let a = Array2::from_elem((n, 1), 0.5);
        let noise = rng::normal_matrix(&mut rng::stream(5, 5), n, 2);
        let next = m.sample(0, s.view(), a.view(), noise.view()).unwrap();
        let (_, log_std) = m
            .predict(0, s.slice(s![..1, ..]), a.slice(s![..1, ..]))
            .unwrap();
        for d in 0..2 {
            let col = next.column(d);
            let mu = col.mean().unwrap();
            let sd = (col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let target = log_std[[0, d]].exp();
            assert!(
                (sd / target - 1.0).abs() < 0.05,
                "dim {d}: {sd} vs {target}"
            );
        }
    }

    #[test]
    fn per_row_members() {
        let m = model(4);
        let s = array![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]];
        let a = array![[0.0], [1.0], [-1.0]];
        let noise = array![[0.5, -0.5], [1.0, 0.0], [0.2, 0.3]];
        let got = m
            .sample_members(s.view(), a.view(), &[2, 0, 2], noise.view())
            .unwrap();
        for (i, k) in [2usize, 0, 2].into_iter().enumerate() {
            let one = m
                .sample(
                    k,
                    s.slice(s![i..i + 1, ..]),
                    a.slice(s![i..i + 1, ..]),
                    noise.slice(s![i..i + 1, ..]),
                )
                .unwrap();
            assert_eq!(got.row(i), one.row(0));
        }
        assert!(m
            .sample_members(s.view(), a.view(), &[0, 7, 0], noise.view())
            .is_err());
    }

    #[test]
    fn zero_final_layer_reward_is_zero() {
        let mut r =
            RewardModel::new(&arch(), Normalizer::identity(2), &mut rng::stream(0, 1)).unwrap();
        r.net.zero_last_layer();
        assert_eq!(r.reward_forward(&[0.3, 9.0], &[-4.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn reward_is_bounded() {
        let r = RewardModel::new(&arch(), Normalizer::identity(2), &mut rng::stream(0, 2)).unwrap();
        let mut g = rng::stream(0, 3);
        let n = 1_000_000;
        let s = rng::normal_matrix(&mut g, n, 2) * 50.0;
        let sn = rng::normal_matrix(&mut g, n, 2) * 50.0;
        let rs = r.rewards(s.view(), sn.view()).unwrap();
        assert!(rs.iter().all(|&x| x > -1.0 && x < 1.0));
    }

    #[test]
    fn reward_gradient_wrt_next_state() {
        let r = RewardModel::new(
            &arch(),
            Normalizer {
                mean: vec![0.1, 0.2],
                std: vec![0.7, 1.3],
            },
            &mut rng::stream(0, 4),
        )
        .unwrap();
        let s = array![[0.4, -0.3]];
        let loss = |sn: &[f64]| {
            let snv = ArrayView2::from_shape((1, 2), sn).unwrap();
            let pass = r.pass(s.view(), snv).unwrap();
            let (_, d) = r.backward(&pass, &array![1.0]).unwrap();
            (pass.rewards[0], d.into_raw_vec_and_offset().0)
        };
        let err = finite_diff_check(loss, &[0.9, -1.1], 1e-5, GradCheckMode::Coordinates).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn checkpoints_round_trip() {
        let m = model(5);
        let back = TransitionModel::from_checkpoint(
            &Checkpoint::parse(
                &m.to_checkpoint(EnvId::PointMass, serde_json::Value::Null)
                    .to_text(),
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(back, m);
        let r = RewardModel::new(&arch(), Normalizer::identity(2), &mut rng::stream(0, 6)).unwrap();
        let c = Checkpoint::parse(
            &r.to_checkpoint(EnvId::PointMass, 1, serde_json::Value::Null)
                .to_text(),
        )
        .unwrap();
        let back = RewardModel::from_checkpoint(&c).unwrap();
        assert_eq!(back.param_hash(), r.param_hash());
        assert!(TransitionModel::from_checkpoint(&c).is_err());
    }
}
