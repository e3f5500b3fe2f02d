//! Analytic continuous-control tasks with ground-truth dynamics.
//!
//! The true reward returned by [`step`] is for evaluation and for training
//! the behavior policies that generate datasets. Nothing on the offline
//! training path reads it.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    #[serde(rename = "pointmass")]
    PointMass,
    Pendulum,
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvId::PointMass => "pointmass",
            EnvId::Pendulum => "pendulum",
        })
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass" => Ok(EnvId::PointMass),
            "pendulum" => Ok(EnvId::Pendulum),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub id: EnvId,
    /// Dimension of the exposed observation.
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub dt: f64,
    pub horizon: usize,
    pub physics: Physics,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Physics {
    PointMass {
        goal: [f64; 2],
        max_speed: f64,
        action_cost: f64,
    },
    Pendulum {
        gravity: f64,
        mass: f64,
        length: f64,
        max_speed: f64,
    },
}

impl EnvSpec {
    pub fn new(id: EnvId) -> Self {
        match id {
            EnvId::PointMass => Self {
                id,
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                dt: 0.05,
                horizon: 200,
                physics: Physics::PointMass {
                    goal: [1.0, 1.0],
                    max_speed: 1.0,
                    action_cost: 0.01,
                },
            },
            EnvId::Pendulum => Self {
                id,
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-2.0],
                action_high: vec![2.0],
                dt: 0.05,
                horizon: 200,
                physics: Physics::Pendulum {
                    gravity: 10.0,
                    mass: 1.0,
                    length: 1.0,
                    max_speed: 8.0,
                },
            },
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon.max(1);
        self
    }

    /// Nominal observation offset and scale used to normalize policy inputs.
    pub fn observation_scale(&self) -> (Vec<f64>, Vec<f64>) {
        match self.id {
            EnvId::PointMass => (vec![0.5, 0.5, 0.0, 0.0], vec![1.0, 1.0, 0.5, 0.5]),
            EnvId::Pendulum => (vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 4.0]),
        }
    }

    /// Clamps an action into the declared bounds.
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }

    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect()
    }
}

/// Internal simulator state. Point mass: `(x, y, vx, vy)`; pendulum:
/// `(θ, θ̇)` with θ wrapped into (-π, π].
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub raw: Vec<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub true_reward: f64,
    pub done: bool,
}

pub(crate) const RESET_STREAM: u64 = 0x5EED_0001;

/// Samples an initial state from the task's start distribution.
pub fn reset(spec: &EnvSpec, seed: u64) -> EnvState {
    reset_with(spec, &mut rng::stream(seed, RESET_STREAM))
}

pub fn reset_with(spec: &EnvSpec, rng: &mut Rng64) -> EnvState {
    let raw = match spec.physics {
        Physics::PointMass { .. } => vec![
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            0.0,
            0.0,
        ],
        Physics::Pendulum { .. } => vec![rng.random_range(-PI..PI), rng.random_range(-1.0..1.0)],
    };
    EnvState { raw, steps: 0 }
}

/// Maps an angle into (-π, π].
pub fn wrap_angle(x: f64) -> f64 {
    x - 2.0 * PI * ((x - PI) / (2.0 * PI)).ceil()
}

pub fn observe(spec: &EnvSpec, state: &EnvState) -> Vec<f64> {
    match spec.physics {
        Physics::PointMass { .. } => state.raw.clone(),
        Physics::Pendulum { .. } => vec![state.raw[0].cos(), state.raw[0].sin(), state.raw[1]],
    }
}

/// Recovers the internal state from an observation (step counter 0).
pub fn state_from_observation(spec: &EnvSpec, obs: &[f64]) -> Result<EnvState> {
    if obs.len() != spec.state_dim {
        return Err(Error::dim("observation", spec.state_dim, obs.len()));
    }
    let raw = match spec.physics {
        Physics::PointMass { .. } => obs.to_vec(),
        Physics::Pendulum { .. } => vec![obs[1].atan2(obs[0]), obs[2]],
    };
    Ok(EnvState { raw, steps: 0 })
}

/// Advances one step. Actions are clipped to bounds before use.
pub fn step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
    if action.len() != spec.action_dim {
        return Err(Error::dim("action", spec.action_dim, action.len()));
    }
    if action.iter().chain(&state.raw).any(|x| !x.is_finite()) {
        return Err(Error::Numerical(
            "non-finite state or action passed to step".into(),
        ));
    }
    let a = spec.clip_action(action);
    let dt = spec.dt;
    let (raw, true_reward) = match spec.physics {
        Physics::PointMass {
            goal,
            max_speed,
            action_cost,
        } => {
            let vx = (state.raw[2] + dt * a[0]).clamp(-max_speed, max_speed);
            let vy = (state.raw[3] + dt * a[1]).clamp(-max_speed, max_speed);
            let x = state.raw[0] + dt * vx;
            let y = state.raw[1] + dt * vy;
            let dist = ((x - goal[0]).powi(2) + (y - goal[1]).powi(2)).sqrt();
            let reward = -dist - action_cost * (a[0] * a[0] + a[1] * a[1]);
            (vec![x, y, vx, vy], reward)
        }
        Physics::Pendulum {
            gravity,
            mass,
            length,
            max_speed,
        } => {
            let (theta, omega) = (state.raw[0], state.raw[1]);
            let u = a[0];
            let accel =
                3.0 * gravity / (2.0 * length) * theta.sin() + 3.0 * u / (mass * length * length);
            let omega = (omega + dt * accel).clamp(-max_speed, max_speed);
            let theta = wrap_angle(theta + dt * omega);
            let reward = -(theta * theta + 0.1 * omega * omega + 0.001 * u * u);
            (vec![theta, omega], reward)
        }
    };
    let steps = state.steps + 1;
    Ok(StepOutcome {
        next: EnvState { raw, steps },
        true_reward,
        done: steps >= spec.horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reset_is_deterministic() {
        for id in [EnvId::PointMass, EnvId::Pendulum] {
            let spec = EnvSpec::new(id);
            assert_eq!(reset(&spec, 17), reset(&spec, 17));
        }
    }

    #[test]
    fn pointmass_reset_has_zero_velocity() {
        let spec = EnvSpec::new(EnvId::PointMass);
        for seed in 0..50 {
            let s = reset(&spec, seed);
            assert_eq!(&s.raw[2..], &[0.0, 0.0]);
            assert!(s.raw[..2].iter().all(|p| p.abs() <= 0.5));
        }
    }

    #[test]
    fn pointmass_reset_mean_near_origin() {
        let spec = EnvSpec::new(EnvId::PointMass);
        let n = 10_000;
        let mut sum = [0.0; 2];
        for seed in 0..n {
            let s = reset(&spec, seed);
            sum[0] += s.raw[0];
            sum[1] += s.raw[1];
        }
        assert!((sum[0] / n as f64).abs() < 0.02);
        assert!((sum[1] / n as f64).abs() < 0.02);
    }

    #[test]
    fn pendulum_fixed_point() {
        let spec = EnvSpec::new(EnvId::Pendulum);
        let s = EnvState {
            raw: vec![0.0, 0.0],
            steps: 0,
        };
        let out = step(&spec, &s, &[0.0]).unwrap();
        assert_eq!(out.next.raw, vec![0.0, 0.0]);
        assert_eq!(out.true_reward, 0.0);
    }

    #[test]
    fn pointmass_euler_step() {
        let spec = EnvSpec::new(EnvId::PointMass);
        let s = EnvState {
            raw: vec![0.0, 0.0, 1.0, 0.0],
            steps: 0,
        };
        let out = step(&spec, &s, &[0.0, 0.0]).unwrap();
        assert!((out.next.raw[0] - 0.05).abs() < 1e-15);
        assert_eq!(out.next.raw[1], 0.0);
    }

    #[test]
    fn pendulum_quarter_turn() {
        let spec = EnvSpec::new(EnvId::Pendulum);
        let s = EnvState {
            raw: vec![PI / 2.0, 0.0],
            steps: 0,
        };
        let out = step(&spec, &s, &[0.0]).unwrap();
        assert!((out.next.raw[1] - 0.75).abs() < 1e-12);
        assert!((out.next.raw[0] - (PI / 2.0 + 0.0375)).abs() < 1e-12);
    }

    #[test]
    fn horizon_and_errors() {
        let spec = EnvSpec::new(EnvId::Pendulum).with_horizon(2);
        let s = reset(&spec, 0);
        let a = step(&spec, &s, &[0.0]).unwrap();
        assert!(!a.done);
        assert!(step(&spec, &a.next, &[0.0]).unwrap().done);
        assert!(step(&spec, &s, &[f64::NAN]).is_err());
        assert!(step(&spec, &s, &[0.0, 1.0]).is_err());
        assert!(matches!(
            "cartpole".parse::<EnvId>(),
            Err(Error::UnknownEnv(_))
        ));
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.3) - 0.3).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn invariants_hold(
            pm in prop::collection::vec(-3.0..3.0f64, 4),
            pa in prop::collection::vec(-5.0..5.0f64, 2),
            th in -10.0..10.0f64,
            om in -8.0..8.0f64,
            u in -5.0..5.0f64,
        ) {
            let spec = EnvSpec::new(EnvId::PointMass);
            let s = EnvState { raw: pm, steps: 0 };
            let a = step(&spec, &s, &pa).unwrap();
            let b = step(&spec, &s, &pa).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.true_reward <= 0.0);
            prop_assert!(a.next.raw[2].abs() <= 1.0 && a.next.raw[3].abs() <= 1.0);

            let spec = EnvSpec::new(EnvId::Pendulum);
            let s = EnvState { raw: vec![wrap_angle(th), om], steps: 0 };
            let a = step(&spec, &s, &[u]).unwrap();
            prop_assert!(a.true_reward <= 0.0);
            prop_assert!(a.next.raw[1].abs() <= 8.0);
            prop_assert!(a.next.raw[0] > -PI && a.next.raw[0] <= PI);
        }
    }
}
