//! On-ramp merging among IDM traffic.
//!
//! The ego vehicle spawns at the top of a 150 m ramp that runs parallel to
//! a single main lane carrying four vehicles. Longitudinal position is
//! measured as distance remaining to the end of the ramp, so `y` counts
//! down as vehicles drive and vehicles ahead have a smaller `y`. The
//! observation is the ego pose plus four relative neighbour blocks; the
//! environment state is exactly that vector, which lets the learned world
//! model integrate the very same quantities the simulator does.
//!
//! Hidden task factors: the main-lane `traffic_speed`, and `rear_response`,
//! the gain `p` with which the nearest rear vehicle mirrors the ego's
//! commanded acceleration (`a_rear = p * a_ego`). The remaining vehicles
//! follow IDM behind their nearest leader.
//!
//! Neighbour observation slots are assigned at spawn (nearest front, second
//! front, nearest rear, second rear) and keep their identity for the whole
//! episode, so each slot stays a smooth function of time.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::idm::{idm_acceleration, idm_desired_gap, idm_free_acceleration, IdmParams};
use super::{
    clip, Action, ActionSpace, EnvId, EnvSchema, EnvState, Environment, FactorSpec, ObsDimSpec,
    TaskSpec,
};

pub const DT: f64 = 0.1;
pub const HORIZON: usize = 150;
pub const LANE_MAIN_X: f64 = 4.0;
pub const LANE_RAMP_X: f64 = 8.0;
pub const VEHICLE_LENGTH: f64 = 5.0;
pub const RAMP_LENGTH: f64 = 150.0;
/// Commanded acceleration magnitude of the accelerate/decelerate actions.
pub const EGO_ACCEL: f64 = 1.5;
/// All traffic accelerations saturate here.
pub const NEIGHBOR_ACCEL_BOUND: f64 = 3.0;
pub const N_NEIGHBORS: usize = 4;
/// Observation slot of the designated (proportionally reacting) rear car.
pub const REAR_SLOT: usize = 2;
/// Bumper-to-bumper clearance below which a completed merge is a crash.
pub const CRASH_GAP: f64 = 5.0;

const V_MAX: f64 = 50.0;

pub const ACT_IDLE: usize = 0;
pub const ACT_LEFT: usize = 1;
pub const ACT_RIGHT: usize = 2;
pub const ACT_ACCEL: usize = 3;
pub const ACT_DECEL: usize = 4;

pub fn schema() -> EnvSchema {
    let mut obs = vec![
        ObsDimSpec {
            name: "ego_x".into(),
            lo: 0.0,
            hi: 12.0,
        },
        ObsDimSpec {
            name: "ego_y".into(),
            lo: 0.0,
            hi: RAMP_LENGTH,
        },
        ObsDimSpec {
            name: "ego_vx".into(),
            lo: 0.0,
            hi: V_MAX,
        },
        ObsDimSpec {
            name: "ego_vy".into(),
            lo: 0.0,
            hi: 10.0,
        },
    ];
    for j in 0..N_NEIGHBORS {
        obs.push(ObsDimSpec {
            name: format!("n{j}_dx"),
            lo: -10.0,
            hi: 10.0,
        });
        obs.push(ObsDimSpec {
            name: format!("n{j}_dy"),
            lo: -RAMP_LENGTH,
            hi: RAMP_LENGTH,
        });
        obs.push(ObsDimSpec {
            name: format!("n{j}_dvx"),
            lo: -20.0,
            hi: 20.0,
        });
        obs.push(ObsDimSpec {
            name: format!("n{j}_dvy"),
            lo: -10.0,
            hi: 10.0,
        });
    }
    EnvSchema {
        id: EnvId::Highway,
        obs,
        action: ActionSpace::Discrete { n: 5 },
        factors: vec![
            FactorSpec {
                name: "traffic_speed".into(),
                lo: 20.0,
                hi: 30.0,
            },
            FactorSpec {
                name: "rear_response".into(),
                lo: -1.0,
                hi: 1.0,
            },
        ],
        horizon: HORIZON,
        dt: DT,
        reward_scale: 20.0,
    }
}

fn on_lane(x: f64, lane: f64) -> bool {
    (x - lane).abs() < 0.5
}

/// Ego commanded acceleration for a discrete action.
pub fn ego_accel_command(action: usize) -> f64 {
    match action {
        ACT_ACCEL => EGO_ACCEL,
        ACT_DECEL => -EGO_ACCEL,
        _ => 0.0,
    }
}

/// One explicit-Euler step of the full 20-dimensional observation given
/// the commanded ego acceleration and the four neighbour accelerations.
///
/// This function is the single source of truth for the vehicle kinematics:
/// the environment calls it with simulator-chosen accelerations, and the
/// world model's hard-wired integrator reproduces it term for term, so a
/// correct acceleration prediction yields a bit-identical next state.
pub fn integrate_highway_observation(
    obs: &[f64],
    action: usize,
    ego_accel: f64,
    neighbor_accels: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(obs.len(), 4 + 4 * N_NEIGHBORS);
    debug_assert_eq!(neighbor_accels.len(), N_NEIGHBORS);
    let (x, y, vx) = (obs[0], obs[1], obs[2]);

    let target_x = match action {
        ACT_LEFT if on_lane(x, LANE_RAMP_X) => LANE_MAIN_X,
        ACT_RIGHT if on_lane(x, LANE_MAIN_X) => LANE_RAMP_X,
        _ => x,
    };
    let new_y = clip(y - vx * DT, 0.0, RAMP_LENGTH);
    let new_vx = clip(vx + ego_accel * DT, 0.0, V_MAX);
    // Saturation can shave the commanded acceleration; relative velocities
    // must integrate the speed changes that actually happened.
    let ego_dv = new_vx - vx;
    let new_x = target_x;
    let new_vy = clip((new_x - x).abs() / DT, 0.0, 10.0);

    let mut next = vec![new_x, new_y, new_vx, new_vy];
    for j in 0..N_NEIGHBORS {
        let base = 4 + 4 * j;
        let (dx, dy, dvx) = (obs[base], obs[base + 1], obs[base + 2]);
        let v_j = vx + dvx;
        let vj_next = clip(v_j + neighbor_accels[j] * DT, 0.0, V_MAX);
        let new_dy = clip(dy - dvx * DT, -RAMP_LENGTH, RAMP_LENGTH);
        let new_dvx = clip(dvx + ((vj_next - v_j) - ego_dv), -20.0, 20.0);
        let new_dx = clip(dx - (new_x - x), -10.0, 10.0);
        let new_dvy = clip(-new_vy, -10.0, 10.0);
        next.extend_from_slice(&[new_dx, new_dy, new_dvx, new_dvy]);
    }
    next
}

/// The four components of the merging reward, before composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HighwayRewardTerms {
    /// `clip(|v - v_env| / 10, 0, 1)`, a speed-deviation magnitude.
    pub speed_deviation: f64,
    /// Headway shortfalls to the nearest front and rear vehicle plus a
    /// 20-point surcharge whenever the designated rear car is braking.
    pub merging_cost: f64,
    /// `-50` on a crash, otherwise `0`.
    pub crash_penalty: f64,
    /// `-1` for lane changes, `-0.2` for speed changes, `0` for idling.
    pub action_cost: f64,
}

impl HighwayRewardTerms {
    /// Total reward. With `negate_deviation` the two magnitude terms count
    /// against the agent; otherwise all terms are summed as they stand.
    pub fn total(&self, negate_deviation: bool) -> f64 {
        let sign = if negate_deviation { -1.0 } else { 1.0 };
        sign * (self.speed_deviation + self.merging_cost) + self.crash_penalty + self.action_cost
    }
}

/// Nearest front (`dy < 0`) and rear (`dy > 0`) neighbour indices.
fn nearest_front_rear(obs: &[f64]) -> (Option<usize>, Option<usize>) {
    let mut front: Option<(usize, f64)> = None;
    let mut rear: Option<(usize, f64)> = None;
    for j in 0..N_NEIGHBORS {
        let dy = obs[4 + 4 * j + 1];
        if dy < 0.0 && front.map_or(true, |(_, best)| dy > best) {
            front = Some((j, dy));
        }
        if dy >= 0.0 && rear.map_or(true, |(_, best)| dy < best) {
            rear = Some((j, dy));
        }
    }
    (front.map(|(j, _)| j), rear.map(|(j, _)| j))
}

/// Reward terms evaluated on a post-step observation.
pub fn highway_reward(
    obs: &[f64],
    action: usize,
    rear_braking: bool,
    crashed: bool,
    traffic_speed: f64,
) -> HighwayRewardTerms {
    let vx = obs[2];
    let speed_deviation = clip((vx - traffic_speed).abs() / 10.0, 0.0, 1.0);

    let idm = IdmParams::with_desired_speed(traffic_speed);
    let (front, rear) = nearest_front_rear(obs);
    let mut merging_cost = 0.0;
    if let Some(j) = front {
        let dy = obs[4 + 4 * j + 1];
        let dvx = obs[4 + 4 * j + 2];
        let gap = -dy - VEHICLE_LENGTH;
        let desired = idm_desired_gap(vx, -dvx, &idm);
        merging_cost += (desired - gap).max(0.0) / desired;
    }
    if let Some(j) = rear {
        let dy = obs[4 + 4 * j + 1];
        let dvx = obs[4 + 4 * j + 2];
        let v_rear = vx + dvx;
        let gap = dy - VEHICLE_LENGTH;
        let desired = idm_desired_gap(v_rear, dvx, &idm);
        merging_cost += (desired - gap).max(0.0) / desired;
    }
    if rear_braking {
        merging_cost += 20.0;
    }

    let crash_penalty = if crashed { -50.0 } else { 0.0 };
    let action_cost = match action {
        ACT_LEFT | ACT_RIGHT => -1.0,
        ACT_ACCEL | ACT_DECEL => -0.2,
        _ => 0.0,
    };
    HighwayRewardTerms {
        speed_deviation,
        merging_cost,
        crash_penalty,
        action_cost,
    }
}

pub struct HighwayEnv {
    spec: TaskSpec,
    schema: EnvSchema,
    traffic_speed: f64,
    rear_response: f64,
    negate_deviation: bool,
    obs: Vec<f64>,
    steps: usize,
    active: bool,
    rng: ChaCha8Rng,
}

impl HighwayEnv {
    pub fn new(
        spec: TaskSpec,
        schema: EnvSchema,
        rng: ChaCha8Rng,
        options: super::EnvOptions,
    ) -> Self {
        let traffic_speed = spec.factor("traffic_speed").expect("validated");
        let rear_response = spec.factor("rear_response").expect("validated");
        HighwayEnv {
            spec,
            schema,
            traffic_speed,
            rear_response,
            negate_deviation: options.highway_negate_deviation,
            obs: vec![0.0; 4 + 4 * N_NEIGHBORS],
            steps: 0,
            active: false,
            rng,
        }
    }

    /// IDM or proportional acceleration for every neighbour slot, given
    /// the commanded ego acceleration.
    fn neighbor_accels(&self, ego_accel: f64) -> Vec<f64> {
        let idm = IdmParams::with_desired_speed(self.traffic_speed);
        let vx = self.obs[2];
        let mut accels = vec![0.0; N_NEIGHBORS];
        for j in 0..N_NEIGHBORS {
            if j == REAR_SLOT {
                accels[j] = self.rear_response * ego_accel;
                continue;
            }
            let dy_j = self.obs[4 + 4 * j + 1];
            let v_j = (vx + self.obs[4 + 4 * j + 2]).max(0.0);
            // Nearest main-lane vehicle ahead of j; the ego is on the ramp
            // and does not take part in the car-following chain.
            let mut leader: Option<(f64, f64)> = None;
            for k in 0..N_NEIGHBORS {
                if k == j {
                    continue;
                }
                let dy_k = self.obs[4 + 4 * k + 1];
                if dy_k < dy_j && leader.map_or(true, |(best, _)| dy_k > best) {
                    leader = Some((dy_k, vx + self.obs[4 + 4 * k + 2]));
                }
            }
            let a = match leader {
                Some((dy_k, v_k)) => {
                    let gap = ((dy_j - dy_k) - VEHICLE_LENGTH).max(0.5);
                    idm_acceleration(v_j, v_j - v_k, gap, &idm).expect("gap forced positive")
                }
                None => idm_free_acceleration(v_j, &idm),
            };
            accels[j] = clip(a, -NEIGHBOR_ACCEL_BOUND, NEIGHBOR_ACCEL_BOUND);
        }
        accels
    }

    fn min_abs_dy(&self, obs: &[f64]) -> f64 {
        (0..N_NEIGHBORS)
            .map(|j| obs[4 + 4 * j + 1].abs())
            .fold(f64::INFINITY, f64::min)
    }
}

impl Environment for HighwayEnv {
    fn schema(&self) -> &EnvSchema {
        &self.schema
    }

    fn task(&self) -> &TaskSpec {
        &self.spec
    }

    fn reset(&mut self) -> EnvState {
        let ego_v = self.traffic_speed * self.rng.random_range(0.85..1.0);
        self.obs[0] = LANE_RAMP_X;
        self.obs[1] = RAMP_LENGTH;
        self.obs[2] = ego_v;
        self.obs[3] = 0.0;

        let front1 = -self.rng.random_range(8.0..16.0);
        let front2 = front1 - self.rng.random_range(14.0..22.0);
        let rear1 = self.rng.random_range(8.0..16.0);
        let rear2 = rear1 + self.rng.random_range(14.0..22.0);
        for (j, dy) in [front1, front2, rear1, rear2].into_iter().enumerate() {
            let v_j = self.traffic_speed * (1.0 + self.rng.random_range(-0.05..0.05));
            let base = 4 + 4 * j;
            self.obs[base] = LANE_MAIN_X - LANE_RAMP_X;
            self.obs[base + 1] = dy;
            self.obs[base + 2] = v_j - ego_v;
            self.obs[base + 3] = 0.0;
        }
        self.steps = 0;
        self.active = true;
        EnvState {
            observation: self.obs.clone(),
            done: false,
            terminal: false,
            steps: 0,
            info: BTreeMap::new(),
        }
    }

    fn step(&mut self, action: &Action) -> Result<(EnvState, f64)> {
        if !self.active {
            return Err(Error::EpisodeNotActive("highway".into()));
        }
        self.schema.validate_action(action)?;
        let a = match action {
            Action::Discrete(a) => *a,
            _ => unreachable!("validated"),
        };

        let ego_accel = ego_accel_command(a);
        let accels = self.neighbor_accels(ego_accel);
        let merging = a == ACT_LEFT && on_lane(self.obs[0], LANE_RAMP_X);
        let next = integrate_highway_observation(&self.obs, a, ego_accel, &accels);
        self.steps += 1;

        let merged = merging && on_lane(next[0], LANE_MAIN_X);
        let collided = merged && self.min_abs_dy(&next) < CRASH_GAP + VEHICLE_LENGTH;
        let ramp_end = !merged && next[1] <= 0.0;
        // Running out of ramp is as bad as a collision.
        let crashed = collided || ramp_end;
        let truncated = self.steps >= HORIZON;
        let terminal = merged || crashed;
        let done = terminal || truncated;

        let rear_accel = accels[REAR_SLOT];
        let terms = highway_reward(&next, a, rear_accel < 0.0, crashed, self.traffic_speed);
        let reward = terms.total(self.negate_deviation);

        let mut info = BTreeMap::new();
        info.insert("ego_accel".into(), ego_accel);
        info.insert("rear_accel".into(), rear_accel);
        for (j, acc) in accels.iter().enumerate() {
            info.insert(format!("accel_{j}"), *acc);
        }
        info.insert("merged".into(), merged as u8 as f64);
        info.insert("crashed".into(), collided as u8 as f64);
        info.insert("ramp_end".into(), ramp_end as u8 as f64);
        info.insert("speed_deviation".into(), terms.speed_deviation);
        info.insert("merging_cost".into(), terms.merging_cost);

        self.obs = next;
        if done {
            self.active = false;
        }
        Ok((
            EnvState {
                observation: self.obs.clone(),
                done,
                terminal,
                steps: self.steps,
                info,
            },
            reward,
        ))
    }
}
