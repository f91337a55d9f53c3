//! Run configuration: a flat key-value schema with typed overrides, a
//! canonical text rendering, and a content hash that ties artifacts to
//! the exact configuration that produced them.

use sha2::{Digest, Sha256};

use crate::env::{EnvId, EnvOptions};
use crate::error::{Error, Result};
use crate::policy::SacConfig;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub env: EnvId,
    pub seed: u64,
    pub out_dir: String,
    /// Outer loop iterations of the meta-training algorithm.
    pub iterations: usize,
    /// Real training tasks.
    pub n_tasks: usize,
    pub latent_dim: usize,
    pub gru_hidden: usize,
    pub model_hidden: Vec<usize>,
    /// Weight on the posterior KL term.
    pub beta: f64,
    /// State reconstruction weight.
    pub alpha_t: f64,
    /// Reward reconstruction weight.
    pub alpha_r: f64,
    /// Intra-cluster pull weight.
    pub alpha_c1: f64,
    /// Inter-cluster push weight.
    pub alpha_c2: f64,
    /// Minimal separation between task clusters, in latent units.
    pub sigma: f64,
    /// Context tuples fed to the encoder per posterior.
    pub context_window: usize,
    /// Posteriors encoded per task per step for the cluster terms.
    pub cluster_windows: usize,
    pub ed_lr: f64,
    /// Encoder-decoder gradient steps per outer iteration.
    pub ed_steps: usize,
    /// Real episodes collected per task per outer iteration.
    pub rollouts_per_task: usize,
    /// Extra random-walk episodes collected per task per iteration,
    /// keeping the buffer broad even once the policy narrows.
    pub explore_episodes: usize,
    /// Steps per imagined rollout.
    pub imagination_horizon: usize,
    /// Imagined rollouts per real task per iteration.
    pub ir_rollouts_per_task: usize,
    /// Imagined rollouts per imaginary task per iteration.
    pub i_rollouts_per_task: usize,
    /// Imaginary tasks composed per iteration.
    pub imaginary_tasks: usize,
    /// Interpolated values per anchor gap.
    pub interpolation_density: usize,
    /// Mixing-weight jitter for interpolation.
    pub interpolation_noise: f64,
    /// Dream rollouts for real tasks into the imagination buffer.
    pub enable_ir: bool,
    /// Compose imaginary tasks and dream rollouts for them.
    pub enable_i: bool,
    /// Policy gradient steps per outer iteration.
    pub policy_steps: usize,
    /// Disentanglement score (fraction) gating imagination.
    pub probe_threshold: f64,
    /// Task pairs per factor in the disentanglement probe.
    pub probe_pairs: usize,
    /// Steps per probe rollout.
    pub probe_rollout_len: usize,
    /// Transitions kept per task.
    pub buffer_capacity: usize,
    /// Size of the recent slice context windows are drawn from.
    pub recent_window: usize,
    /// Episodes per task in the per-iteration evaluation.
    pub eval_episodes: usize,
    pub checkpoint_every: usize,
    /// Swap the physics-informed transition template for direct
    /// regression.
    pub no_physics: bool,
    pub cartpole_reward_centered: bool,
    pub highway_negate_deviation: bool,
    pub sac: SacConfig,
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("key `{key}`: cannot parse `{value}` as {want}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad(key, value, "bool")),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad(key, value, "usize list")))
        .collect()
}

fn format_list(list: &[usize]) -> String {
    list.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ : $kind:ident ),+ $(,)?) => {
        impl TrainConfig {
            /// Sets a single key from its text form.
            pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => { self.$($field).+ = config_keys!(@parse $kind, $key, value); } )+
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// Canonical `key = value` rendering, one line per key, in a
            /// fixed order. Hashing this text identifies the config.
            pub fn to_kv_text(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str($key);
                    out.push_str(" = ");
                    out.push_str(&config_keys!(@format $kind, &self.$($field).+));
                    out.push('\n');
                )+
                out
            }
        }
    };
    (@parse usize, $key:literal, $v:ident) => {
        $v.trim().parse::<usize>().map_err(|_| bad($key, $v, "usize"))?
    };
    (@parse u64, $key:literal, $v:ident) => {
        $v.trim().parse::<u64>().map_err(|_| bad($key, $v, "u64"))?
    };
    (@parse f64, $key:literal, $v:ident) => {{
        let x = $v.trim().parse::<f64>().map_err(|_| bad($key, $v, "f64"))?;
        if !x.is_finite() {
            return Err(bad($key, $v, "finite f64"));
        }
        x
    }};
    (@parse bool, $key:literal, $v:ident) => { parse_bool($key, $v)? };
    (@parse env, $key:literal, $v:ident) => { EnvId::parse($v.trim())? };
    (@parse list, $key:literal, $v:ident) => { parse_list($key, $v)? };
    (@parse string, $key:literal, $v:ident) => { $v.trim().to_string() };
    (@format env, $v:expr) => { $v.to_string() };
    (@format list, $v:expr) => { format_list($v) };
    (@format string, $v:expr) => { $v.to_string() };
    (@format $other:ident, $v:expr) => { $v.to_string() };
}

config_keys! {
    "env" => env : env,
    "seed" => seed : u64,
    "out_dir" => out_dir : string,
    "iterations" => iterations : usize,
    "n_tasks" => n_tasks : usize,
    "latent_dim" => latent_dim : usize,
    "gru_hidden" => gru_hidden : usize,
    "model_hidden" => model_hidden : list,
    "beta" => beta : f64,
    "alpha_t" => alpha_t : f64,
    "alpha_r" => alpha_r : f64,
    "alpha_c1" => alpha_c1 : f64,
    "alpha_c2" => alpha_c2 : f64,
    "sigma" => sigma : f64,
    "context_window" => context_window : usize,
    "cluster_windows" => cluster_windows : usize,
    "ed_lr" => ed_lr : f64,
    "ed_steps" => ed_steps : usize,
    "rollouts_per_task" => rollouts_per_task : usize,
    "explore_episodes" => explore_episodes : usize,
    "imagination_horizon" => imagination_horizon : usize,
    "ir_rollouts_per_task" => ir_rollouts_per_task : usize,
    "i_rollouts_per_task" => i_rollouts_per_task : usize,
    "imaginary_tasks" => imaginary_tasks : usize,
    "interpolation_density" => interpolation_density : usize,
    "interpolation_noise" => interpolation_noise : f64,
    "enable_ir" => enable_ir : bool,
    "enable_i" => enable_i : bool,
    "policy_steps" => policy_steps : usize,
    "probe_threshold" => probe_threshold : f64,
    "probe_pairs" => probe_pairs : usize,
    "probe_rollout_len" => probe_rollout_len : usize,
    "buffer_capacity" => buffer_capacity : usize,
    "recent_window" => recent_window : usize,
    "eval_episodes" => eval_episodes : usize,
    "checkpoint_every" => checkpoint_every : usize,
    "no_physics" => no_physics : bool,
    "cartpole_reward_centered" => cartpole_reward_centered : bool,
    "highway_negate_deviation" => highway_negate_deviation : bool,
    "sac.discount" => sac.discount : f64,
    "sac.target_smoothing" => sac.target_smoothing : f64,
    "sac.entropy_weight" => sac.entropy_weight : f64,
    "sac.batch_size" => sac.batch_size : usize,
    "sac.lr" => sac.lr : f64,
    "sac.real_weight" => sac.real_weight : f64,
    "sac.imaginary_weight" => sac.imaginary_weight : f64,
    "sac.hidden" => sac.hidden : list,
}

impl TrainConfig {
    pub fn default_for(env: EnvId) -> Self {
        let wide = matches!(env, EnvId::Highway);
        let hidden = if wide { vec![128, 128] } else { vec![64, 64] };
        TrainConfig {
            env,
            seed: 0,
            out_dir: format!("runs/{env}"),
            iterations: 50,
            n_tasks: 8,
            latent_dim: 4,
            gru_hidden: 64,
            model_hidden: hidden.clone(),
            beta: 5.0,
            alpha_t: 1.0,
            alpha_r: 1.0,
            alpha_c1: 0.1,
            alpha_c2: 0.1,
            sigma: 2.0,
            context_window: 64,
            cluster_windows: 2,
            ed_lr: 1e-3,
            ed_steps: 60,
            rollouts_per_task: 2,
            explore_episodes: 1,
            imagination_horizon: 25,
            ir_rollouts_per_task: 2,
            i_rollouts_per_task: 2,
            imaginary_tasks: 8,
            interpolation_density: 4,
            interpolation_noise: 0.125,
            enable_ir: true,
            enable_i: true,
            policy_steps: 200,
            probe_threshold: 0.8,
            probe_pairs: 16,
            probe_rollout_len: 64,
            buffer_capacity: 20_000,
            recent_window: 600,
            eval_episodes: 2,
            checkpoint_every: 10,
            no_physics: false,
            cartpole_reward_centered: false,
            highway_negate_deviation: true,
            sac: SacConfig {
                hidden,
                ..SacConfig::default()
            },
        }
    }

    /// Parses a whole key-value file. Lines are `key = value`; `#` starts
    /// a comment; the `env` key (anywhere in the file) picks the defaults
    /// the remaining keys override.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        let env = pairs
            .iter()
            .find(|(k, _)| k == "env")
            .map(|(_, v)| EnvId::parse(v))
            .transpose()?
            .unwrap_or(EnvId::Nav2d);
        let mut config = TrainConfig::default_for(env);
        for (key, value) in &pairs {
            config.apply_override(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.sac.validate()?;
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config(format!("sigma {} must be > 0", self.sigma)));
        }
        for (name, v) in [
            ("alpha_t", self.alpha_t),
            ("alpha_r", self.alpha_r),
            ("alpha_c1", self.alpha_c1),
            ("alpha_c2", self.alpha_c2),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} {v} must be >= 0")));
            }
        }
        if self.n_tasks < 2 {
            return Err(Error::Config("need at least 2 real tasks".into()));
        }
        if self.latent_dim == 0 || self.gru_hidden == 0 {
            return Err(Error::Config("latent_dim and gru_hidden must be >= 1".into()));
        }
        if self.context_window == 0 || self.cluster_windows == 0 {
            return Err(Error::Config(
                "context_window and cluster_windows must be >= 1".into(),
            ));
        }
        if self.interpolation_density < 1 {
            return Err(Error::Config("interpolation_density must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.probe_threshold) {
            return Err(Error::Config(format!(
                "probe_threshold {} outside [0,1]",
                self.probe_threshold
            )));
        }
        if self.ed_lr <= 0.0 || !self.ed_lr.is_finite() {
            return Err(Error::Config(format!("ed_lr {} must be positive", self.ed_lr)));
        }
        if self.buffer_capacity == 0 || self.recent_window == 0 {
            return Err(Error::Config(
                "buffer_capacity and recent_window must be >= 1".into(),
            ));
        }
        if self.recent_window > self.buffer_capacity {
            return Err(Error::Config(
                "recent_window cannot exceed buffer_capacity".into(),
            ));
        }
        if self.imagination_horizon == 0 {
            return Err(Error::Config("imagination_horizon must be >= 1".into()));
        }
        Ok(())
    }

    pub fn env_options(&self) -> EnvOptions {
        EnvOptions {
            cartpole_reward_centered: self.cartpole_reward_centered,
            highway_negate_deviation: self.highway_negate_deviation,
        }
    }

    /// Hex digest of the canonical text form.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_kv_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
