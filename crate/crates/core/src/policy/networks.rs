use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{ActMode, Actor};
use crate::checkpoint::Checkpoint;
use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::numerics::{
    squash_correction, Activation, Head, Mlp, MlpTape, Normalizer, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::rng::{self, Rng64};
use crate::simulator::layer_sizes;

/// Normalized actions are kept at least this far inside `(-1, 1)` so that
/// emitted actions stay strictly within bounds after rescaling.
pub const ACTION_EDGE: f64 = 1.0 - 1e-9;
/// Clip applied to dataset actions before `atanh` in likelihood terms.
pub const DATA_ACTION_CLIP: f64 = 1.0 - 1e-4;

pub(crate) const POLICY_HEAD: Head = Head::Gaussian {
    log_std_min: LOG_STD_MIN,
    log_std_max: LOG_STD_MAX,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyArch {
    pub hidden: usize,
    /// Affine layers per network.
    pub layers: usize,
    pub activation: Activation,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 4,
            activation: Activation::Relu,
        }
    }
}

/// Observation normalization and action rescaling shared by actors and critics.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpace {
    pub obs_norm: Normalizer,
    pub center: Vec<f64>,
    pub half: Vec<f64>,
}

impl ActionSpace {
    pub fn for_env(spec: &EnvSpec) -> Self {
        let (mean, std) = spec.observation_scale();
        Self {
            obs_norm: Normalizer { mean, std },
            center: spec
                .action_low
                .iter()
                .zip(&spec.action_high)
                .map(|(l, h)| 0.5 * (l + h))
                .collect(),
            half: spec
                .action_low
                .iter()
                .zip(&spec.action_high)
                .map(|(l, h)| 0.5 * (h - l))
                .collect(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.obs_norm.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.center.len()
    }

    /// Normalized actions in `(-1, 1)` to env units.
    pub fn to_env(&self, normalized: ArrayView2<f64>) -> Array2<f64> {
        let mut out = normalized.to_owned();
        for mut row in out.rows_mut() {
            for ((x, c), h) in row.iter_mut().zip(&self.center).zip(&self.half) {
                *x = c + h * x.clamp(-ACTION_EDGE, ACTION_EDGE);
            }
        }
        out
    }

    /// Env-unit actions to normalized units, clipped into `±DATA_ACTION_CLIP`.
    pub fn normalize(&self, actions: ArrayView2<f64>) -> Array2<f64> {
        let mut out = actions.to_owned();
        for mut row in out.rows_mut() {
            for ((x, c), h) in row.iter_mut().zip(&self.center).zip(&self.half) {
                *x = ((*x - c) / h).clamp(-DATA_ACTION_CLIP, DATA_ACTION_CLIP);
            }
        }
        out
    }

    fn check_states(&self, states: ArrayView2<f64>) -> Result<()> {
        if states.ncols() != self.state_dim() {
            return Err(Error::dim(
                "policy state input",
                self.state_dim(),
                states.ncols(),
            ));
        }
        Ok(())
    }

    fn norm_vectors(&self, out: &mut BTreeMap<String, Vec<f64>>) {
        out.insert("obs_mean".into(), self.obs_norm.mean.clone());
        out.insert("obs_std".into(), self.obs_norm.std.clone());
        out.insert("action_center".into(), self.center.clone());
        out.insert("action_half".into(), self.half.clone());
    }

    fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let space = Self {
            obs_norm: Normalizer {
                mean: c.norm("obs_mean")?,
                std: c.norm("obs_std")?,
            },
            center: c.norm("action_center")?,
            half: c.norm("action_half")?,
        };
        if space.state_dim() != c.header.state_dim || space.action_dim() != c.header.action_dim {
            return Err(Error::dim(
                "policy checkpoint normalization",
                c.header.state_dim,
                space.state_dim(),
            ));
        }
        Ok(space)
    }
}

/// Forward pass of a Gaussian policy.
pub(crate) struct PolicyPass {
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    pub tape: MlpTape,
}

/// Reparameterized squashed sample: `ã = tanh(μ + σ ⊙ ε)`.
#[derive(Clone, Debug)]
pub struct SquashedSample {
    pub pre_tanh: Array2<f64>,
    pub action: Array2<f64>,
    pub log_prob: Array1<f64>,
}

/// Tanh-squashed diagonal Gaussian policy over normalized actions.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub space: ActionSpace,
}

impl GaussianPolicy {
    pub fn new(space: ActionSpace, arch: &PolicyArch, rng: &mut Rng64) -> Result<Self> {
        let sizes = layer_sizes(
            space.state_dim(),
            arch.hidden,
            arch.layers,
            2 * space.action_dim(),
        );
        Ok(Self {
            net: Mlp::new(&sizes, arch.activation, POLICY_HEAD, rng)?,
            space,
        })
    }

    pub(crate) fn pass(&self, states: ArrayView2<f64>) -> Result<PolicyPass> {
        self.space.check_states(states)?;
        let (out, tape) = self.net.forward(self.space.obs_norm.apply(states).view())?;
        let da = self.space.action_dim();
        Ok(PolicyPass {
            mean: out.slice(s![.., ..da]).to_owned(),
            log_std: out.slice(s![.., da..]).to_owned(),
            tape,
        })
    }

    /// Mean and log-std of the pre-tanh Gaussian.
    pub fn distribution(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let p = self.pass(states)?;
        Ok((p.mean, p.log_std))
    }

    pub(crate) fn squash(pass: &PolicyPass, noise: ArrayView2<f64>) -> SquashedSample {
        let u = &pass.mean + &(pass.log_std.mapv(f64::exp) * noise);
        let mut log_prob = Array1::zeros(u.nrows());
        for i in 0..u.nrows() {
            let mut lp = 0.0;
            for d in 0..u.ncols() {
                let e = noise[[i, d]];
                lp += -0.5 * e * e
                    - pass.log_std[[i, d]]
                    - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    - squash_correction(u[[i, d]]);
            }
            log_prob[i] = lp;
        }
        SquashedSample {
            action: u.mapv(f64::tanh),
            pre_tanh: u,
            log_prob,
        }
    }

    /// Sample with caller-supplied standard-normal noise.
    pub fn sample(
        &self,
        states: ArrayView2<f64>,
        noise: ArrayView2<f64>,
    ) -> Result<SquashedSample> {
        let pass = self.pass(states)?;
        if noise.dim() != pass.mean.dim() {
            return Err(Error::dim("policy noise", pass.mean.ncols(), noise.ncols()));
        }
        Ok(Self::squash(&pass, noise))
    }

    /// Squashed log-density of normalized actions (clipped before `atanh`).
    pub fn log_prob(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        let pass = self.pass(states)?;
        if actions.dim() != pass.mean.dim() {
            return Err(Error::dim(
                "policy action input",
                pass.mean.ncols(),
                actions.ncols(),
            ));
        }
        let noise = (pre_tanh_of(actions) - &pass.mean) / pass.log_std.mapv(f64::exp);
        Ok(Self::squash(&pass, noise.view()).log_prob)
    }

    pub fn to_checkpoint(&self, env: EnvId, config: serde_json::Value) -> Checkpoint {
        let mut norm = BTreeMap::new();
        self.space.norm_vectors(&mut norm);
        Checkpoint::new(
            "gaussian_policy",
            env,
            self.space.state_dim(),
            self.space.action_dim(),
            vec![self.net.clone()],
            norm,
            config,
        )
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("gaussian_policy")?;
        let space = ActionSpace::from_checkpoint(c)?;
        let net = single_net(c)?;
        if net.input_dim() != space.state_dim() || net.output_dim() != 2 * space.action_dim() {
            return Err(Error::dim(
                "policy network output",
                2 * space.action_dim(),
                net.output_dim(),
            ));
        }
        Ok(Self { net, space })
    }
}

pub(crate) fn pre_tanh_of(actions: ArrayView2<f64>) -> Array2<f64> {
    actions.mapv(|a| a.clamp(-DATA_ACTION_CLIP, DATA_ACTION_CLIP).atanh())
}

fn single_net(c: &Checkpoint) -> Result<Mlp> {
    c.nets
        .first()
        .cloned()
        .ok_or_else(|| Error::Config("checkpoint has no network".into()))
}

impl Actor for GaussianPolicy {
    fn state_dim(&self) -> usize {
        self.space.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.space.action_dim()
    }

    fn act(&self, states: ArrayView2<f64>, mode: ActMode, rng: &mut Rng64) -> Result<Array2<f64>> {
        let pass = self.pass(states)?;
        let normalized = match mode {
            ActMode::Deterministic => pass.mean.mapv(f64::tanh),
            ActMode::Explore => {
                let noise = rng::normal_matrix(rng, pass.mean.nrows(), pass.mean.ncols());
                Self::squash(&pass, noise.view()).action
            }
        };
        Ok(self.space.to_env(normalized.view()))
    }
}

/// Deterministic actor `ã = tanh(f(s))` with Gaussian exploration noise.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicPolicy {
    pub net: Mlp,
    pub space: ActionSpace,
    /// Exploration noise std in normalized action units.
    pub noise_std: f64,
}

impl DeterministicPolicy {
    pub fn new(
        space: ActionSpace,
        arch: &PolicyArch,
        noise_std: f64,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let sizes = layer_sizes(
            space.state_dim(),
            arch.hidden,
            arch.layers,
            space.action_dim(),
        );
        Ok(Self {
            net: Mlp::new(&sizes, arch.activation, Head::Tanh, rng)?,
            space,
            noise_std,
        })
    }

    /// Normalized actions and the tape of the pass.
    pub(crate) fn pass(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, MlpTape)> {
        self.space.check_states(states)?;
        self.net.forward(self.space.obs_norm.apply(states).view())
    }

    pub fn normalized_actions(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.pass(states)?.0)
    }

    pub fn to_checkpoint(&self, env: EnvId, config: serde_json::Value) -> Checkpoint {
        let mut norm = BTreeMap::new();
        self.space.norm_vectors(&mut norm);
        norm.insert("noise_std".into(), vec![self.noise_std]);
        Checkpoint::new(
            "deterministic_policy",
            env,
            self.space.state_dim(),
            self.space.action_dim(),
            vec![self.net.clone()],
            norm,
            config,
        )
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("deterministic_policy")?;
        let space = ActionSpace::from_checkpoint(c)?;
        let net = single_net(c)?;
        if net.input_dim() != space.state_dim() || net.output_dim() != space.action_dim() {
            return Err(Error::dim(
                "policy network output",
                space.action_dim(),
                net.output_dim(),
            ));
        }
        let noise_std = c.norm("noise_std")?.first().copied().unwrap_or(0.0);
        Ok(Self {
            net,
            space,
            noise_std,
        })
    }
}

impl Actor for DeterministicPolicy {
    fn state_dim(&self) -> usize {
        self.space.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.space.action_dim()
    }

    fn act(&self, states: ArrayView2<f64>, mode: ActMode, rng: &mut Rng64) -> Result<Array2<f64>> {
        let mut a = self.normalized_actions(states)?;
        if mode == ActMode::Explore && self.noise_std > 0.0 {
            a += &(rng::normal_matrix(rng, a.nrows(), a.ncols()) * self.noise_std);
        }
        Ok(self.space.to_env(a.view()))
    }
}

/// Twin Q-networks over `(normalized state, normalized action)` with
/// Polyak-averaged target copies.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticPair {
    pub q: [Mlp; 2],
    pub target: [Mlp; 2],
    pub obs_norm: Normalizer,
}

/// Forward pass of one critic.
pub(crate) struct CriticPass {
    pub values: Array1<f64>,
    pub tape: MlpTape,
}

impl CriticPair {
    pub fn new(space: &ActionSpace, arch: &PolicyArch, rng: &mut Rng64) -> Result<Self> {
        let sizes = layer_sizes(
            space.state_dim() + space.action_dim(),
            arch.hidden,
            arch.layers,
            1,
        );
        let q = [
            Mlp::new(&sizes, arch.activation, Head::Linear, rng)?,
            Mlp::new(&sizes, arch.activation, Head::Linear, rng)?,
        ];
        Ok(Self {
            target: q.clone(),
            q,
            obs_norm: space.obs_norm.clone(),
        })
    }

    fn inputs(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        if states.ncols() != self.obs_norm.dim() || states.nrows() != actions.nrows() {
            return Err(Error::dim(
                "critic state input",
                self.obs_norm.dim(),
                states.ncols(),
            ));
        }
        Ok(concatenate![Axis(1), self.obs_norm.apply(states), actions])
    }

    pub(crate) fn pass(
        &self,
        j: usize,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<CriticPass> {
        let (out, tape) = self.q[j].forward(self.inputs(states, actions)?.view())?;
        Ok(CriticPass {
            values: out.column(0).to_owned(),
            tape,
        })
    }

    pub fn value(
        &self,
        j: usize,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        Ok(self.q[j]
            .predict(self.inputs(states, actions)?.view())?
            .column(0)
            .to_owned())
    }

    /// Element-wise minimum of the two target critics.
    pub fn target_min(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        let x = self.inputs(states, actions)?;
        let a = self.target[0].predict(x.view())?;
        let b = self.target[1].predict(x.view())?;
        Ok(a.column(0)
            .iter()
            .zip(b.column(0))
            .map(|(x, y)| x.min(*y))
            .collect())
    }

    /// `∂Q_j/∂ã` per row, scaled by `weights` (one weight per row).
    pub(crate) fn action_grad(
        &self,
        j: usize,
        pass: &CriticPass,
        weights: &Array1<f64>,
    ) -> Result<Array2<f64>> {
        let up = weights.view().insert_axis(Axis(1));
        let (_, d_in) = self.q[j].backward(&pass.tape, up)?;
        Ok(d_in.slice(s![.., self.obs_norm.dim()..]).to_owned())
    }

    pub fn soft_update(&mut self, tau: f64) {
        for (t, q) in self.target.iter_mut().zip(&self.q) {
            t.polyak_from(q, tau);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvSpec;
    use crate::numerics::DiagonalGaussian;

    fn policy() -> GaussianPolicy {
        let space = ActionSpace::for_env(&EnvSpec::new(EnvId::PointMass));
        GaussianPolicy::new(space, &PolicyArch::default(), &mut rng::stream(1, 1)).unwrap()
    }

    #[test]
    fn log_prob_matches_distribution_math() {
        let p = policy();
        let s =
            Array2::from_shape_vec((2, 4), vec![0.1, 0.2, 0.0, 0.3, -0.4, 0.5, 0.2, -0.1]).unwrap();
        let a = Array2::from_shape_vec((2, 2), vec![0.3, -0.7, 0.9, 0.0]).unwrap();
        let lp = p.log_prob(s.view(), a.view()).unwrap();
        let (mean, log_std) = p.distribution(s.view()).unwrap();
        for i in 0..2 {
            let g = DiagonalGaussian::new(mean.row(i).to_vec(), log_std.row(i).to_vec()).unwrap();
            let u: Vec<f64> = a.row(i).iter().map(|x| x.atanh()).collect();
            let want = g.tanh_squash_log_prob(&u).unwrap();
            assert!((lp[i] - want).abs() < 1e-10, "{} vs {want}", lp[i]);
        }
    }

    #[test]
    fn actions_stay_inside_bounds() {
        let mut p = policy();
        // saturate the mean head
        let last = p.net.layers.last_mut().unwrap();
        last.bias.slice_mut(s![..2]).fill(1e6);
        p.net.touch();
        let s = Array2::zeros((3, 4));
        let mut g = rng::stream(0, 0);
        for mode in [ActMode::Deterministic, ActMode::Explore] {
            let a = p.act(s.view(), mode, &mut g).unwrap();
            assert!(a.iter().all(|&x| x > -1.0 && x < 1.0), "{a:?}");
        }
    }

    #[test]
    fn space_round_trip() {
        let space = ActionSpace::for_env(&EnvSpec::new(EnvId::Pendulum));
        let a = Array2::from_shape_vec((3, 1), vec![-1.5, 0.0, 1.9]).unwrap();
        let back = space.to_env(space.normalize(a.view()).view());
        assert!(back.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn checkpoints_round_trip() {
        let p = policy();
        let c = Checkpoint::parse(
            &p.to_checkpoint(EnvId::PointMass, serde_json::Value::Null)
                .to_text(),
        )
        .unwrap();
        assert_eq!(GaussianPolicy::from_checkpoint(&c).unwrap(), p);
        let space = ActionSpace::for_env(&EnvSpec::new(EnvId::Pendulum));
        let d =
            DeterministicPolicy::new(space, &PolicyArch::default(), 0.1, &mut rng::stream(2, 2))
                .unwrap();
        let c = Checkpoint::parse(
            &d.to_checkpoint(EnvId::Pendulum, serde_json::Value::Null)
                .to_text(),
        )
        .unwrap();
        assert_eq!(DeterministicPolicy::from_checkpoint(&c).unwrap(), d);
        assert!(GaussianPolicy::from_checkpoint(&c).is_err());
    }
}
