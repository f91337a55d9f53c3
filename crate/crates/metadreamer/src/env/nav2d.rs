//! Point-mass navigation on a bounded plane.
//!
//! The agent starts at the origin and applies a velocity command each step;
//! the hidden task is the goal position. Reward is the negative Euclidean
//! distance from the post-step position to the goal, so returns improve as
//! the agent learns to park on the goal.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{
    clip, integrate_position, Action, ActionSpace, EnvId, EnvSchema, EnvState, Environment,
    FactorSpec, ObsDimSpec, TaskSpec,
};

pub const BOUND: f64 = 4.0;
pub const DT: f64 = 0.1;
const HORIZON: usize = 100;

pub fn schema() -> EnvSchema {
    EnvSchema {
        id: EnvId::Nav2d,
        obs: vec![
            ObsDimSpec {
                name: "x".into(),
                lo: -BOUND,
                hi: BOUND,
            },
            ObsDimSpec {
                name: "y".into(),
                lo: -BOUND,
                hi: BOUND,
            },
        ],
        action: ActionSpace::Continuous {
            dim: 2,
            lo: -1.0,
            hi: 1.0,
        },
        factors: vec![
            FactorSpec {
                name: "goal_x".into(),
                lo: -2.0,
                hi: 2.0,
            },
            FactorSpec {
                name: "goal_y".into(),
                lo: 0.0,
                hi: 2.0,
            },
        ],
        horizon: HORIZON,
        dt: DT,
        reward_scale: 4.0,
    }
}

/// Negative distance from `pos` to the goal.
pub fn nav2d_reward(pos: &[f64], goal: (f64, f64)) -> f64 {
    let dx = pos[0] - goal.0;
    let dy = pos[1] - goal.1;
    -(dx * dx + dy * dy).sqrt()
}

pub struct Nav2dEnv {
    spec: TaskSpec,
    schema: EnvSchema,
    goal: (f64, f64),
    pos: [f64; 2],
    steps: usize,
    active: bool,
    #[allow(dead_code)]
    rng: ChaCha8Rng,
}

impl Nav2dEnv {
    pub fn new(spec: TaskSpec, schema: EnvSchema, rng: ChaCha8Rng) -> Self {
        let goal = (
            spec.factor("goal_x").expect("validated"),
            spec.factor("goal_y").expect("validated"),
        );
        Nav2dEnv {
            spec,
            schema,
            goal,
            pos: [0.0, 0.0],
            steps: 0,
            active: false,
            rng,
        }
    }

    fn state(&self, done: bool) -> EnvState {
        EnvState {
            observation: self.pos.to_vec(),
            done,
            terminal: false,
            steps: self.steps,
            info: BTreeMap::new(),
        }
    }
}

impl Environment for Nav2dEnv {
    fn schema(&self) -> &EnvSchema {
        &self.schema
    }

    fn task(&self) -> &TaskSpec {
        &self.spec
    }

    fn reset(&mut self) -> EnvState {
        self.pos = [0.0, 0.0];
        self.steps = 0;
        self.active = true;
        self.state(false)
    }

    fn step(&mut self, action: &Action) -> Result<(EnvState, f64)> {
        if !self.active {
            return Err(crate::error::Error::EpisodeNotActive("nav2d".into()));
        }
        self.schema.validate_action(action)?;
        let a = match action {
            Action::Continuous(a) => a,
            _ => unreachable!("validated"),
        };
        for i in 0..2 {
            self.pos[i] = clip(integrate_position(self.pos[i], a[i], DT), -BOUND, BOUND);
        }
        self.steps += 1;
        let reward = nav2d_reward(&self.pos, self.goal);
        let done = self.steps >= HORIZON;
        if done {
            self.active = false;
        }
        Ok((self.state(done), reward))
    }
}
