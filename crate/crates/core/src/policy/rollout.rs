use ndarray::Array2;
use rand::Rng;

use super::{ActMode, Actor};
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::rng::{self, Rng64};
use crate::simulator::{RewardModel, TransitionModel};

/// Multiple of the dataset's per-dimension range beyond which a model state
/// counts as exploded.
pub const EXPLOSION_FACTOR: f64 = 100.0;

/// Per-dimension box derived from dataset states; rollouts stop once a
/// model-generated state leaves it.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGuard {
    pub center: Vec<f64>,
    pub limit: Vec<f64>,
}

impl StateGuard {
    pub fn from_source(source: &DataSource) -> Self {
        let ds = source.state_dim();
        let mut lo = vec![f64::INFINITY; ds];
        let mut hi = vec![f64::NEG_INFINITY; ds];
        for t in source.all() {
            for row in [&t.s, &t.s_next] {
                for d in 0..ds {
                    lo[d] = lo[d].min(row[d]);
                    hi[d] = hi[d].max(row[d]);
                }
            }
        }
        Self {
            center: lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect(),
            limit: lo
                .iter()
                .zip(&hi)
                .map(|(l, h)| EXPLOSION_FACTOR * (h - l).max(1e-6))
                .collect(),
        }
    }

    pub fn admits(&self, s: &[f64]) -> bool {
        s.iter()
            .zip(self.center.iter().zip(&self.limit))
            .all(|(x, (c, l))| x.is_finite() && (x - c).abs() <= *l)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualStep {
    pub s: Vec<f64>,
    /// Env-unit action.
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VirtualRollout {
    /// Step-major: all live branches' first step, then their second, ...
    pub steps: Vec<VirtualStep>,
    /// Branches cut short by the explosion guard.
    pub truncated: usize,
}

/// Branched `k`-step rollouts in the learned simulator, starting from
/// dataset states. Each step draws the ensemble member uniformly per branch.
#[allow(clippy::too_many_arguments)]
pub fn virtual_rollout(
    transition: &TransitionModel,
    reward: &RewardModel,
    actor: &dyn Actor,
    source: &DataSource,
    branches: usize,
    k: usize,
    guard: &StateGuard,
    rng: &mut Rng64,
) -> Result<VirtualRollout> {
    if k == 0 || branches == 0 {
        return Err(Error::Config(
            "rollouts need k >= 1 and at least one branch".into(),
        ));
    }
    if actor.state_dim() != transition.state_dim() || actor.action_dim() != transition.action_dim()
    {
        return Err(Error::dim(
            "rollout policy",
            transition.state_dim(),
            actor.state_dim(),
        ));
    }
    let mut states: Array2<f64> = source.sample_batch(branches, rng).s;
    let mut out = VirtualRollout::default();
    for _ in 0..k {
        if states.nrows() == 0 {
            break;
        }
        let n = states.nrows();
        let actions = actor.act(states.view(), ActMode::Explore, rng)?;
        let members: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..transition.num_members()))
            .collect();
        let noise = rng::normal_matrix(rng, n, transition.state_dim());
        let next =
            transition.sample_members(states.view(), actions.view(), &members, noise.view())?;
        let r = reward.rewards(states.view(), next.view())?;
        let mut keep = Vec::with_capacity(n);
        for i in 0..n {
            let sn = next.row(i).to_vec();
            if !guard.admits(&sn) || !r[i].is_finite() {
                out.truncated += 1;
                continue;
            }
            out.steps.push(VirtualStep {
                s: states.row(i).to_vec(),
                a: actions.row(i).to_vec(),
                r: r[i],
                s_next: sn,
            });
            keep.push(i);
        }
        states = next.select(ndarray::Axis(0), &keep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Quality, Transition};
    use crate::envs::{EnvId, EnvSpec};
    use crate::numerics::Normalizer;
    use crate::policy::{ActionSpace, GaussianPolicy, PolicyArch};
    use crate::simulator::SimArch;

    fn dataset() -> Dataset {
        let ts = (0..20)
            .map(|i| {
                let x = i as f64 * 0.05;
                Transition::new(
                    vec![x, -x, 0.1 * x, 1.0 - x],
                    vec![0.5, -0.5],
                    vec![x + 0.01, -x, 0.1 * x, 1.0 - x],
                )
            })
            .collect();
        Dataset::new(EnvId::PointMass, Quality::Expert, 4, 2, ts, 0, 0.0).unwrap()
    }

    fn models(identity: bool) -> (TransitionModel, RewardModel, GaussianPolicy) {
        let mut g = rng::stream(1, 1);
        let arch = SimArch {
            members: 3,
            transition_layers: 2,
            transition_hidden: 8,
            reward_layers: 2,
            reward_hidden: 8,
            ..SimArch::default()
        };
        let scale = if identity { 0.0 } else { 1.0 };
        let t = TransitionModel::new(
            &arch,
            Normalizer::identity(4),
            Normalizer::identity(2),
            vec![scale; 4],
            &mut g,
        )
        .unwrap();
        let r = RewardModel::new(&arch, Normalizer::identity(4), &mut g).unwrap();
        let p = GaussianPolicy::new(
            ActionSpace::for_env(&EnvSpec::new(EnvId::PointMass)),
            &PolicyArch::default(),
            &mut g,
        )
        .unwrap();
        (t, r, p)
    }

    #[test]
    fn single_step_starts_from_data() {
        let d = dataset();
        let src = DataSource::Single(&d);
        let (t, r, p) = models(false);
        let out = virtual_rollout(
            &t,
            &r,
            &p,
            &src,
            1,
            1,
            &StateGuard::from_source(&src),
            &mut rng::stream(0, 0),
        )
        .unwrap();
        assert_eq!(out.steps.len(), 1);
        assert!(d.transitions().iter().any(|x| x.s == out.steps[0].s));
    }

    #[test]
    fn rewards_bounded_and_chained() {
        let d = dataset();
        let src = DataSource::Single(&d);
        let (t, r, p) = models(false);
        let out = virtual_rollout(
            &t,
            &r,
            &p,
            &src,
            1,
            5,
            &StateGuard::from_source(&src),
            &mut rng::stream(2, 0),
        )
        .unwrap();
        assert_eq!(out.steps.len(), 5);
        for w in out.steps.windows(2) {
            assert_eq!(w[1].s, w[0].s_next);
        }
        assert!(out.steps.iter().all(|s| s.r > -1.0 && s.r < 1.0));
        assert!(out.steps.iter().all(|s| s.a.iter().all(|a| a.abs() < 1.0)));
    }

    #[test]
    fn identity_model_repeats_state() {
        let d = dataset();
        let src = DataSource::Single(&d);
        let (t, r, p) = models(true);
        let out = virtual_rollout(
            &t,
            &r,
            &p,
            &src,
            1,
            4,
            &StateGuard::from_source(&src),
            &mut rng::stream(3, 0),
        )
        .unwrap();
        assert_eq!(out.steps.len(), 4);
        let s0 = &out.steps[0].s;
        let r0 = r.reward_forward(s0, s0).unwrap();
        for st in &out.steps {
            assert_eq!(&st.s, s0);
            assert_eq!(&st.s_next, s0);
            assert_eq!(st.r, r0);
        }
    }

    #[test]
    fn guard_truncates_exploding_models() {
        let d = dataset();
        let src = DataSource::Single(&d);
        let (mut t, r, p) = models(false);
        t.delta_scale = vec![1e9; 4];
        let out = virtual_rollout(
            &t,
            &r,
            &p,
            &src,
            3,
            5,
            &StateGuard::from_source(&src),
            &mut rng::stream(4, 0),
        )
        .unwrap();
        assert_eq!(out.truncated, 3);
        assert!(out.steps.is_empty());
    }
}
