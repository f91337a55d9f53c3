//! Cart-pole balancing with task-dependent gravity and push strength.
//!
//! Dynamics follow the classic cart-pole equations integrated with explicit
//! Euler at 20 ms. The reward is dense: a constant 2 minus soft penalties
//! on cart excursion, cart speed, pole angle, and pole angular velocity,
//! so a perfectly balanced pole earns just under 2 per step.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{
    clip, integrate_position, integrate_velocity, Action, ActionSpace, EnvId, EnvSchema, EnvState,
    Environment, FactorSpec, ObsDimSpec, TaskSpec,
};

pub const DT: f64 = 0.02;
pub const THETA_LIMIT: f64 = 0.418;
pub const X_LIMIT: f64 = 4.8;
pub const VEL_LIMIT: f64 = 10.0;
const HORIZON: usize = 100;
const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const POLE_HALF_LENGTH: f64 = 0.5;

pub fn schema() -> EnvSchema {
    EnvSchema {
        id: EnvId::CartPole,
        obs: vec![
            ObsDimSpec {
                name: "cart_position".into(),
                lo: -X_LIMIT,
                hi: X_LIMIT,
            },
            ObsDimSpec {
                name: "cart_velocity".into(),
                lo: -VEL_LIMIT,
                hi: VEL_LIMIT,
            },
            ObsDimSpec {
                name: "pole_angle".into(),
                lo: -THETA_LIMIT,
                hi: THETA_LIMIT,
            },
            ObsDimSpec {
                name: "pole_velocity".into(),
                lo: -VEL_LIMIT,
                hi: VEL_LIMIT,
            },
        ],
        action: ActionSpace::Discrete { n: 2 },
        factors: vec![
            FactorSpec {
                name: "gravity_scale".into(),
                lo: 0.1,
                hi: 2.0,
            },
            FactorSpec {
                name: "force_mag".into(),
                lo: 5.0,
                hi: 15.0,
            },
        ],
        horizon: HORIZON,
        dt: DT,
        reward_scale: 1.0,
    }
}

/// Cart and pole angular accelerations for the given state and inputs.
/// `state` is `[x, x_dot, theta, theta_dot]`.
pub fn cartpole_accelerations(
    state: &[f64],
    force: f64,
    gravity_scale: f64,
) -> (f64, f64) {
    let gravity = GRAVITY * gravity_scale;
    let theta = state[2];
    let theta_dot = state[3];
    let total_mass = MASS_CART + MASS_POLE;
    let pole_mass_length = MASS_POLE * POLE_HALF_LENGTH;
    let cos = theta.cos();
    let sin = theta.sin();
    let temp = (force + pole_mass_length * theta_dot * theta_dot * sin) / total_mass;
    let theta_acc = (gravity * sin - cos * temp)
        / (POLE_HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
    (x_acc, theta_acc)
}

/// Dense reward in `(1.0, 2.0]`: a constant 2 minus saturating penalties
/// on cart excursion, cart speed, angle, and angle rate. The stock angle
/// penalty is `tanh(|theta - theta_limit|)`, which peaks reward at the
/// threshold; `centered` swaps in `tanh(|theta|)` to favour upright poles.
pub fn cartpole_reward(state: &[f64], centered: bool) -> f64 {
    let angle_term = if centered {
        state[2].abs().tanh()
    } else {
        (state[2] - THETA_LIMIT).abs().tanh()
    };
    2.0 - 0.3 * state[0].abs().tanh()
        - 0.2 * state[1].abs().tanh()
        - 0.3 * angle_term
        - 0.2 * state[3].abs().tanh()
}

pub struct CartPoleEnv {
    spec: TaskSpec,
    schema: EnvSchema,
    gravity_scale: f64,
    force_mag: f64,
    centered_reward: bool,
    state: [f64; 4],
    steps: usize,
    active: bool,
    last_acc: (f64, f64),
    rng: ChaCha8Rng,
}

impl CartPoleEnv {
    pub fn new(
        spec: TaskSpec,
        schema: EnvSchema,
        rng: ChaCha8Rng,
        options: super::EnvOptions,
    ) -> Self {
        let gravity_scale = spec.factor("gravity_scale").expect("validated");
        let force_mag = spec.factor("force_mag").expect("validated");
        CartPoleEnv {
            spec,
            schema,
            gravity_scale,
            force_mag,
            centered_reward: options.cartpole_reward_centered,
            state: [0.0; 4],
            steps: 0,
            active: false,
            last_acc: (0.0, 0.0),
            rng,
        }
    }

    fn snapshot(&self, done: bool, terminal: bool) -> EnvState {
        let mut obs = self.state.to_vec();
        self.schema.clip_obs(&mut obs);
        let mut info = BTreeMap::new();
        info.insert("x_accel".into(), self.last_acc.0);
        info.insert("theta_accel".into(), self.last_acc.1);
        EnvState {
            observation: obs,
            done,
            terminal,
            steps: self.steps,
            info,
        }
    }
}

impl Environment for CartPoleEnv {
    fn schema(&self) -> &EnvSchema {
        &self.schema
    }

    fn task(&self) -> &TaskSpec {
        &self.spec
    }

    fn reset(&mut self) -> EnvState {
        for s in &mut self.state {
            *s = self.rng.random_range(-0.05..0.05);
        }
        self.steps = 0;
        self.active = true;
        self.last_acc = (0.0, 0.0);
        self.snapshot(false, false)
    }

    fn step(&mut self, action: &Action) -> Result<(EnvState, f64)> {
        if !self.active {
            return Err(Error::EpisodeNotActive("cartpole".into()));
        }
        self.schema.validate_action(action)?;
        let force = match action {
            Action::Discrete(1) => self.force_mag,
            Action::Discrete(_) => -self.force_mag,
            _ => unreachable!("validated"),
        };
        let (x_acc, theta_acc) = cartpole_accelerations(&self.state, force, self.gravity_scale);
        self.last_acc = (x_acc, theta_acc);
        let [x, x_dot, theta, theta_dot] = self.state;
        self.state = [
            clip(integrate_position(x, x_dot, DT), -X_LIMIT, X_LIMIT),
            clip(integrate_velocity(x_dot, x_acc, DT), -VEL_LIMIT, VEL_LIMIT),
            integrate_position(theta, theta_dot, DT),
            clip(integrate_velocity(theta_dot, theta_acc, DT), -VEL_LIMIT, VEL_LIMIT),
        ];
        self.steps += 1;
        let fell = self.state[2].abs() > THETA_LIMIT;
        self.state[2] = clip(self.state[2], -THETA_LIMIT, THETA_LIMIT);
        let reward = cartpole_reward(&self.state, self.centered_reward);
        let truncated = self.steps >= HORIZON;
        let done = fell || truncated;
        if done {
            self.active = false;
        }
        Ok((self.snapshot(done, fell), reward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_env;

    fn fresh(gravity_scale: f64, force_mag: f64, seed: u64) -> Box<dyn Environment> {
        let mut env = make_env(&TaskSpec::cartpole(gravity_scale, force_mag), seed).unwrap();
        env.reset();
        env
    }

    #[test]
    fn reset_is_near_upright_and_seeded() {
        let mut a = make_env(&TaskSpec::cartpole(1.0, 10.0), 3).unwrap();
        let mut b = make_env(&TaskSpec::cartpole(1.0, 10.0), 3).unwrap();
        let sa = a.reset();
        let sb = b.reset();
        assert_eq!(sa.observation, sb.observation);
        assert!(sa.observation.iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn euler_update_matches_reported_accelerations() {
        let mut env = fresh(1.3, 12.0, 7);
        let before = env
            .step(&Action::Discrete(1))
            .unwrap()
            .0;
        let (after, _) = env.step(&Action::Discrete(0)).unwrap();
        let b = &before.observation;
        let x_acc = after.info["x_accel"];
        let theta_acc = after.info["theta_accel"];
        let (ex_acc, etheta_acc) = cartpole_accelerations(b, -12.0, 1.3);
        assert_eq!(x_acc, ex_acc);
        assert_eq!(theta_acc, etheta_acc);
        assert_eq!(after.observation[0], b[0] + b[1] * DT);
        assert_eq!(after.observation[1], b[1] + x_acc * DT);
        assert_eq!(after.observation[2], b[2] + b[3] * DT);
        assert_eq!(after.observation[3], b[3] + theta_acc * DT);
    }

    #[test]
    fn heavy_gravity_drops_the_pole_without_control() {
        let mut env = fresh(2.0, 5.0, 9);
        let mut terminal = false;
        for _ in 0..100 {
            let (s, _) = env.step(&Action::Discrete(0)).unwrap();
            if s.done {
                terminal = s.terminal;
                break;
            }
        }
        assert!(terminal, "constant pushing should topple the pole");
    }

    #[test]
    fn reward_matches_stated_values() {
        // Every term vanishes when the pole sits exactly at the threshold.
        assert_eq!(cartpole_reward(&[0.0, 0.0, THETA_LIMIT, 0.0], false), 2.0);
        // One term at tanh = 0.5.
        let theta = THETA_LIMIT + 0.5f64.atanh();
        let r = cartpole_reward(&[0.0, 0.0, theta, 0.0], false);
        assert!((r - 1.85).abs() < 1e-12);
        // Saturating every term floors the reward at 1.
        let r = cartpole_reward(&[1e6, 1e6, 1e6, 1e6], false);
        assert!((r - 1.0).abs() < 1e-9);
        // The centered variant peaks upright instead.
        assert_eq!(cartpole_reward(&[0.0, 0.0, 0.0, 0.0], true), 2.0);
    }
}
