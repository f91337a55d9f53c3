//! Task-parameterised environments.
//!
//! Each environment family exposes the same contract: a schema describing
//! observation dimensions with finite ranges, an action space, the hidden
//! task factors with their sampling ranges, and a fixed horizon. A
//! [`TaskSpec`] pins the factors to concrete values; [`make_env`] turns the
//! pair `(spec, seed)` into a deterministic episode generator.
//!
//! Dynamics integrate with explicit Euler through the tiny helpers at the
//! bottom of this module. The learned world model reuses the same helpers,
//! which is what lets tests demand bit-identical physics between the
//! simulator and the model's hard-wired integrator.

pub mod cartpole;
pub mod highway;
pub mod idm;
pub mod nav2d;

pub use cartpole::{cartpole_accelerations, cartpole_reward, CartPoleEnv};
pub use highway::{
    highway_reward, integrate_highway_observation, HighwayEnv, HighwayRewardTerms, EGO_ACCEL,
    LANE_MAIN_X, LANE_RAMP_X, N_NEIGHBORS, VEHICLE_LENGTH,
};
pub use idm::{idm_acceleration, idm_desired_gap, IdmParams};
pub use nav2d::{nav2d_reward, Nav2dEnv};

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum EnvId {
    Nav2d,
    CartPole,
    Highway,
}

impl EnvId {
    pub const ALL: [EnvId; 3] = [EnvId::Nav2d, EnvId::CartPole, EnvId::Highway];

    pub fn as_str(&self) -> &'static str {
        match self {
            EnvId::Nav2d => "nav2d",
            EnvId::CartPole => "cartpole",
            EnvId::Highway => "highway-merge-v0",
        }
    }

    pub fn parse(s: &str) -> Result<EnvId> {
        match s {
            "nav2d" => Ok(EnvId::Nav2d),
            "cartpole" => Ok(EnvId::CartPole),
            "highway-merge-v0" | "highway" => Ok(EnvId::Highway),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ActionSpace {
    /// Box action `[lo, hi]^dim`.
    Continuous { dim: usize, lo: f64, hi: f64 },
    /// Integer actions `0..n`.
    Discrete { n: usize },
}

impl ActionSpace {
    /// Width of the flat encoding fed to networks: raw values for a box,
    /// one-hot for a discrete space.
    pub fn encoded_dim(&self) -> usize {
        match self {
            ActionSpace::Continuous { dim, .. } => *dim,
            ActionSpace::Discrete { n } => *n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

/// One observation dimension with the finite range the environment keeps
/// it inside. Ranges double as the normalisation used by every network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObsDimSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// A hidden task factor and the interval tasks are sampled from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnvSchema {
    pub id: EnvId,
    pub obs: Vec<ObsDimSpec>,
    pub action: ActionSpace,
    pub factors: Vec<FactorSpec>,
    pub horizon: usize,
    pub dt: f64,
    /// Typical reward magnitude; reconstruction losses divide by this so
    /// reward errors are commensurate with normalised state errors.
    pub reward_scale: f64,
}

impl EnvSchema {
    pub fn obs_dim(&self) -> usize {
        self.obs.len()
    }

    /// Width of one encoded context tuple `(s, a, r, s')`.
    pub fn context_tuple_dim(&self) -> usize {
        2 * self.obs_dim() + self.action.encoded_dim() + 1
    }

    pub fn factor(&self, name: &str) -> Option<&FactorSpec> {
        self.factors.iter().find(|f| f.name == name)
    }

    pub fn factor_names(&self) -> Vec<&str> {
        self.factors.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn validate_action(&self, action: &Action) -> Result<()> {
        match (&self.action, action) {
            (ActionSpace::Continuous { dim, lo, hi }, Action::Continuous(a)) => {
                if a.len() != *dim {
                    return Err(Error::InvalidAction(format!(
                        "expected {dim} components, got {}",
                        a.len()
                    )));
                }
                for &v in a {
                    if !v.is_finite() || v < *lo || v > *hi {
                        return Err(Error::InvalidAction(format!(
                            "component {v} outside [{lo}, {hi}]"
                        )));
                    }
                }
                Ok(())
            }
            (ActionSpace::Discrete { n }, Action::Discrete(a)) => {
                if a >= n {
                    Err(Error::InvalidAction(format!("index {a} >= {n}")))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::InvalidAction(format!(
                "action kind does not match {:?}",
                self.action
            ))),
        }
    }

    /// Flat network encoding: box actions as raw values, discrete as one-hot.
    pub fn encode_action(&self, action: &Action) -> Result<Vec<f64>> {
        self.validate_action(action)?;
        Ok(match action {
            Action::Continuous(a) => a.clone(),
            Action::Discrete(a) => {
                let n = self.action.encoded_dim();
                let mut v = vec![0.0; n];
                v[*a] = 1.0;
                v
            }
        })
    }

    /// Maps each dimension from its declared range onto `[-1, 1]`.
    pub fn normalize_obs(&self, obs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(obs.len(), self.obs.len());
        obs.iter()
            .zip(&self.obs)
            .map(|(&x, d)| (2.0 * x - (d.lo + d.hi)) / (d.hi - d.lo))
            .collect()
    }

    /// Per-dimension `(scale, offset)` so that `scale*x + offset` equals
    /// [`EnvSchema::normalize_obs`]; the tape applies it as one op.
    pub fn normalization_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self.obs.iter().map(|d| 2.0 / (d.hi - d.lo)).collect();
        let offset: Vec<f64> = self
            .obs
            .iter()
            .map(|d| -(d.lo + d.hi) / (d.hi - d.lo))
            .collect();
        (scale, offset)
    }

    pub fn obs_lo(&self) -> Vec<f64> {
        self.obs.iter().map(|d| d.lo).collect()
    }

    pub fn obs_hi(&self) -> Vec<f64> {
        self.obs.iter().map(|d| d.hi).collect()
    }

    pub fn clip_obs(&self, obs: &mut [f64]) {
        for (x, d) in obs.iter_mut().zip(&self.obs) {
            *x = clip(*x, d.lo, d.hi);
        }
    }

    pub fn validate_task(&self, spec: &TaskSpec) -> Result<()> {
        if spec.env != self.id {
            return Err(Error::UnknownEnv(format!(
                "task for {} given to {}",
                spec.env, self.id
            )));
        }
        for f in &self.factors {
            let value = spec.factor(&f.name)?;
            if !value.is_finite() || value < f.lo || value > f.hi {
                return Err(Error::FactorOutOfRange {
                    name: f.name.clone(),
                    value,
                    lo: f.lo,
                    hi: f.hi,
                });
            }
        }
        for name in spec.factors.keys() {
            if self.factor(name).is_none() {
                return Err(Error::Config(format!(
                    "task factor `{name}` unknown to {}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Key-value description written into run directories so downstream
    /// tools know ranges without touching this crate.
    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("env = {}\n", self.id));
        out.push_str(&format!("obs_dim = {}\n", self.obs_dim()));
        match &self.action {
            ActionSpace::Continuous { dim, lo, hi } => {
                out.push_str(&format!("action = continuous:{dim}:[{lo},{hi}]\n"));
            }
            ActionSpace::Discrete { n } => out.push_str(&format!("action = discrete:{n}\n")),
        }
        out.push_str(&format!("horizon = {}\n", self.horizon));
        out.push_str(&format!("dt = {}\n", self.dt));
        out.push_str(&format!("reward_scale = {}\n", self.reward_scale));
        for (i, d) in self.obs.iter().enumerate() {
            out.push_str(&format!("obs.{i} = {} [{}, {}]\n", d.name, d.lo, d.hi));
        }
        for f in &self.factors {
            out.push_str(&format!("factor.{} = [{}, {}]\n", f.name, f.lo, f.hi));
        }
        out
    }
}

/// An environment family member: factor names pinned to values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskSpec {
    pub env: EnvId,
    pub factors: BTreeMap<String, f64>,
}

impl TaskSpec {
    pub fn new(env: EnvId, factors: &[(&str, f64)]) -> Self {
        TaskSpec {
            env,
            factors: factors
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        }
    }

    pub fn nav2d(goal_x: f64, goal_y: f64) -> Self {
        TaskSpec::new(EnvId::Nav2d, &[("goal_x", goal_x), ("goal_y", goal_y)])
    }

    pub fn cartpole(gravity_scale: f64, force_mag: f64) -> Self {
        TaskSpec::new(
            EnvId::CartPole,
            &[("gravity_scale", gravity_scale), ("force_mag", force_mag)],
        )
    }

    pub fn highway(traffic_speed: f64, rear_response: f64) -> Self {
        TaskSpec::new(
            EnvId::Highway,
            &[
                ("traffic_speed", traffic_speed),
                ("rear_response", rear_response),
            ],
        )
    }

    pub fn factor(&self, name: &str) -> Result<f64> {
        self.factors
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("task has no factor `{name}`")))
    }

    /// Factor values in schema order, normalised to `[0, 1]` by range.
    pub fn normalized_factors(&self, schema: &EnvSchema) -> Result<Vec<f64>> {
        schema
            .factors
            .iter()
            .map(|f| {
                let v = self.factor(&f.name)?;
                Ok((v - f.lo) / (f.hi - f.lo))
            })
            .collect()
    }
}

/// Snapshot the environment hands back after reset or step.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub observation: Vec<f64>,
    /// Episode over, for any reason.
    pub done: bool,
    /// True only for genuine ends (crash, fall, success). A horizon cut
    /// leaves this false so value bootstrapping can continue through it.
    pub terminal: bool,
    /// Steps taken so far this episode.
    pub steps: usize,
    pub info: BTreeMap<String, f64>,
}

pub trait Environment {
    fn schema(&self) -> &EnvSchema;
    fn task(&self) -> &TaskSpec;
    /// Starts a fresh episode and returns its first state.
    fn reset(&mut self) -> EnvState;
    /// Advances one step. Errors if the action is invalid or the episode
    /// is finished or was never started.
    fn step(&mut self, action: &Action) -> Result<(EnvState, f64)>;
}

pub fn schema_for(env: EnvId) -> EnvSchema {
    match env {
        EnvId::Nav2d => nav2d::schema(),
        EnvId::CartPole => cartpole::schema(),
        EnvId::Highway => highway::schema(),
    }
}

/// Behaviour switches that are part of the configuration surface rather
/// than the task distribution.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnvOptions {
    /// Replace the cart-pole angle penalty `tanh(|theta - theta_thrd|)`
    /// with `tanh(|theta|)` so that upright poles score best. Off by
    /// default: the stock formula rewards holding the pole at the
    /// threshold angle.
    pub cartpole_reward_centered: bool,
    /// Enter the highway speed-deviation and merging-cost terms with a
    /// minus sign (they are magnitudes of undesirable behaviour). When
    /// false all four terms are summed raw.
    pub highway_negate_deviation: bool,
}

impl Default for EnvOptions {
    fn default() -> Self {
        EnvOptions {
            cartpole_reward_centered: false,
            highway_negate_deviation: true,
        }
    }
}

/// Instantiates the family member described by `spec`. The returned
/// environment is in a pre-reset state; identical `(spec, seed)` pairs
/// replay identical episode streams.
pub fn make_env(spec: &TaskSpec, seed: u64) -> Result<Box<dyn Environment>> {
    make_env_with(spec, seed, EnvOptions::default())
}

pub fn make_env_with(
    spec: &TaskSpec,
    seed: u64,
    options: EnvOptions,
) -> Result<Box<dyn Environment>> {
    let schema = schema_for(spec.env);
    schema.validate_task(spec)?;
    let rng = derive_rng(seed, &format!("env::{}", spec.env));
    Ok(match spec.env {
        EnvId::Nav2d => Box::new(Nav2dEnv::new(spec.clone(), schema, rng)),
        EnvId::CartPole => Box::new(CartPoleEnv::new(spec.clone(), schema, rng, options)),
        EnvId::Highway => Box::new(HighwayEnv::new(spec.clone(), schema, rng, options)),
    })
}

/// Draws one state from the family's initial-state distribution,
/// marginalised over tasks. Imagined rollouts for tasks that exist only
/// as latent vectors start here.
pub fn sample_initial_state(env: EnvId, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let spec = sample_task_specs(env, 1, rng).remove(0);
    let seed: u64 = rng.random();
    let mut e = make_env(&spec, seed).expect("sampled task is valid");
    e.reset().observation
}

/// Draws `n` tasks uniformly from the factor ranges of `env`.
pub fn sample_task_specs(env: EnvId, n: usize, rng: &mut ChaCha8Rng) -> Vec<TaskSpec> {
    let schema = schema_for(env);
    (0..n)
        .map(|_| {
            let factors = schema
                .factors
                .iter()
                .map(|f| (f.name.clone(), rng.random_range(f.lo..=f.hi)))
                .collect();
            TaskSpec { env, factors }
        })
        .collect()
}

/// A task whose stated factor equals `value` and whose other factors sit
/// at their range midpoints. Used by probes that vary one factor at a time.
pub fn task_with_factor(env: EnvId, name: &str, value: f64) -> Result<TaskSpec> {
    let schema = schema_for(env);
    if schema.factor(name).is_none() {
        return Err(Error::Config(format!("{env} has no factor `{name}`")));
    }
    let factors = schema
        .factors
        .iter()
        .map(|f| {
            let v = if f.name == name {
                value
            } else {
                0.5 * (f.lo + f.hi)
            };
            (f.name.clone(), v)
        })
        .collect();
    Ok(TaskSpec { env, factors })
}

/// Random-walk exploration used for world-model data collection and
/// probing: resample an action, hold it a few steps, repeat. Holding gives
/// trajectories enough momentum to expose the dynamics factors.
pub struct RandomWalkExplorer {
    space: ActionSpace,
    env: EnvId,
    hold: usize,
    current: Option<Action>,
    remaining: usize,
}

impl RandomWalkExplorer {
    pub fn new(schema: &EnvSchema) -> Self {
        let hold = match schema.id {
            EnvId::Nav2d => 10,
            EnvId::CartPole => 2,
            EnvId::Highway => 3,
        };
        RandomWalkExplorer {
            space: schema.action.clone(),
            env: schema.id,
            hold,
            current: None,
            remaining: 0,
        }
    }

    pub fn act(&mut self, rng: &mut ChaCha8Rng) -> Action {
        if self.remaining == 0 || self.current.is_none() {
            self.current = Some(self.sample(rng));
            self.remaining = self.hold;
        }
        self.remaining -= 1;
        self.current.clone().expect("just filled")
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Action {
        match &self.space {
            ActionSpace::Continuous { dim, lo, hi } => Action::Continuous(
                (0..*dim).map(|_| rng.random_range(*lo..=*hi)).collect(),
            ),
            ActionSpace::Discrete { n } => {
                if self.env == EnvId::Highway {
                    // Lane changes end the episode quickly; keep them rare so
                    // exploration actually exercises the longitudinal factors.
                    let r: f64 = rng.random_range(0.0..1.0);
                    let a = if r < 0.35 {
                        0
                    } else if r < 0.40 {
                        1
                    } else if r < 0.45 {
                        2
                    } else if r < 0.725 {
                        3
                    } else {
                        4
                    };
                    Action::Discrete(a)
                } else {
                    Action::Discrete(rng.random_range(0..*n))
                }
            }
        }
    }
}

pub fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.clamp(lo, hi)
}

/// Explicit Euler position update `p + v*dt`.
pub fn integrate_position(p: f64, v: f64, dt: f64) -> f64 {
    p + v * dt
}

/// Explicit Euler velocity update `v + a*dt`.
pub fn integrate_velocity(v: f64, a: f64, dt: f64) -> f64 {
    v + a * dt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn schemas_are_well_formed() {
        for env in EnvId::ALL {
            let s = schema_for(env);
            assert!(!s.obs.is_empty());
            assert!(s.obs.iter().all(|d| d.lo < d.hi));
            assert!(s.factors.iter().all(|f| f.lo < f.hi));
            assert!(s.horizon > 0);
            assert!(s.dt > 0.0);
        }
    }

    #[test]
    fn normalization_maps_range_to_unit_interval() {
        let s = schema_for(EnvId::Highway);
        let lo = s.obs_lo();
        let hi = s.obs_hi();
        let nl = s.normalize_obs(&lo);
        let nh = s.normalize_obs(&hi);
        assert!(nl.iter().all(|&v| (v + 1.0).abs() < 1e-12));
        assert!(nh.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let (scale, offset) = s.normalization_affine();
        let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        for (i, &x) in mid.iter().enumerate() {
            let via_affine = scale[i] * x + offset[i];
            assert!((via_affine - s.normalize_obs(&mid)[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn task_validation_rejects_out_of_range_factors() {
        let schema = schema_for(EnvId::Nav2d);
        let bad = TaskSpec::nav2d(3.5, 1.0);
        assert!(matches!(
            schema.validate_task(&bad),
            Err(Error::FactorOutOfRange { .. })
        ));
        let good = TaskSpec::nav2d(1.5, 1.0);
        assert!(schema.validate_task(&good).is_ok());
    }

    #[test]
    fn sampled_tasks_respect_ranges() {
        let mut rng = rng_from_seed(11);
        for env in EnvId::ALL {
            let schema = schema_for(env);
            for spec in sample_task_specs(env, 32, &mut rng) {
                schema.validate_task(&spec).unwrap();
            }
        }
    }

    #[test]
    fn one_hot_encoding_is_exact() {
        let s = schema_for(EnvId::Highway);
        let enc = s.encode_action(&Action::Discrete(3)).unwrap();
        assert_eq!(enc, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(s.encode_action(&Action::Discrete(5)).is_err());
    }
}
