//! Soft actor-critic conditioned on a task latent.
//!
//! The latent enters every network as a plain input value, never as a
//! tape parameter, so policy updates cannot push gradients back into the
//! task encoder. Twin critics with a slowly tracking target copy guard
//! against value overestimation. Real and imagined batches contribute to
//! the same update step through separate weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, ActionSpace, EnvSchema};
use crate::error::{Error, Result};
use crate::infer::STD_FLOOR;
use crate::nn::{
    finite_diff_check, GaussianHead, GradCheckReport, Mlp, MlpSpec, OutputSquash, ParameterStore,
    Tape, Var,
};
use crate::policy::Transition;
use crate::rng::standard_normal;
use crate::world::StatePolicy;

const LN_2PI: f64 = 1.8378770664093453;
const LN_2: f64 = core::f64::consts::LN_2;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SacConfig {
    pub discount: f64,
    pub target_smoothing: f64,
    pub entropy_weight: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight on losses from real-environment batches.
    pub real_weight: f64,
    /// Weight on losses from imagination batches.
    pub imaginary_weight: f64,
    pub hidden: Vec<usize>,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            discount: 0.99,
            target_smoothing: 0.005,
            entropy_weight: 0.2,
            batch_size: 64,
            lr: 3e-4,
            real_weight: 1.0,
            imaginary_weight: 1.0,
            hidden: vec![64, 64],
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::Config(format!("discount {} outside (0,1)", self.discount)));
        }
        if !(self.target_smoothing > 0.0 && self.target_smoothing <= 1.0) {
            return Err(Error::Config(format!(
                "target_smoothing {} outside (0,1]",
                self.target_smoothing
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.real_weight < 0.0 || self.imaginary_weight < 0.0 {
            return Err(Error::Config("batch weights must be >= 0".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Config("policy needs at least one hidden layer".into()));
        }
        Ok(())
    }
}

enum ActorNets {
    Continuous {
        trunk: Mlp,
        head: GaussianHead,
        scale: Vec<f64>,
        offset: Vec<f64>,
    },
    Discrete {
        logits: Mlp,
        n: usize,
    },
}

/// Per-step loss values, for logging only.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SacLosses {
    pub critic: f64,
    pub actor: f64,
}

pub struct SacAgent {
    schema: EnvSchema,
    latent_dim: usize,
    config: SacConfig,
    actor_store: ParameterStore,
    critic_store: ParameterStore,
    target_store: ParameterStore,
    actor: ActorNets,
    q1: Mlp,
    q2: Mlp,
    target_q1: Mlp,
    target_q2: Mlp,
}

impl SacAgent {
    pub fn new(
        schema: &EnvSchema,
        latent_dim: usize,
        config: SacConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut actor_store = ParameterStore::new("actor");
        let mut critic_store = ParameterStore::new("critic");
        let mut target_store = ParameterStore::new("critic_target");
        let obs = schema.obs_dim();
        let hidden = &config.hidden;

        let actor = match &schema.action {
            ActionSpace::Continuous { dim, lo, hi } => {
                let feature_dim = *hidden.last().unwrap();
                let trunk = Mlp::new(
                    &mut actor_store,
                    "policy.actor.trunk",
                    MlpSpec::new(obs + latent_dim, &hidden[..hidden.len() - 1], feature_dim)
                        .with_squash(OutputSquash::BoundedTanh(1.0)),
                    rng,
                )?;
                let head = GaussianHead::new(
                    &mut actor_store,
                    "policy.actor.head",
                    feature_dim,
                    *dim,
                    STD_FLOOR,
                    rng,
                )?;
                let scale = vec![(hi - lo) / 2.0; *dim];
                let offset = vec![(hi + lo) / 2.0; *dim];
                ActorNets::Continuous {
                    trunk,
                    head,
                    scale,
                    offset,
                }
            }
            ActionSpace::Discrete { n } => ActorNets::Discrete {
                logits: Mlp::new(
                    &mut actor_store,
                    "policy.actor.logits",
                    MlpSpec::new(obs + latent_dim, hidden, *n),
                    rng,
                )?,
                n: *n,
            },
        };

        let q_input = match &schema.action {
            ActionSpace::Continuous { dim, .. } => obs + dim + latent_dim,
            ActionSpace::Discrete { .. } => obs + latent_dim,
        };
        let q_output = match &schema.action {
            ActionSpace::Continuous { .. } => 1,
            ActionSpace::Discrete { n } => *n,
        };
        let q_spec = MlpSpec::new(q_input, hidden, q_output);
        let q1 = Mlp::new(&mut critic_store, "policy.q1", q_spec.clone(), rng)?;
        let q2 = Mlp::new(&mut critic_store, "policy.q2", q_spec.clone(), rng)?;
        let target_q1 = Mlp::new(&mut target_store, "policy.q1", q_spec.clone(), rng)?;
        let target_q2 = Mlp::new(&mut target_store, "policy.q2", q_spec, rng)?;
        target_store.blend_from(&critic_store, 1.0)?;

        Ok(SacAgent {
            schema: schema.clone(),
            latent_dim,
            config,
            actor_store,
            critic_store,
            target_store,
            actor,
            q1,
            q2,
            target_q1,
            target_q2,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn schema(&self) -> &EnvSchema {
        &self.schema
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn stores(&self) -> [&ParameterStore; 3] {
        [&self.actor_store, &self.critic_store, &self.target_store]
    }

    pub fn stores_mut(&mut self) -> [&mut ParameterStore; 3] {
        [
            &mut self.actor_store,
            &mut self.critic_store,
            &mut self.target_store,
        ]
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(Error::Shape(format!(
                "latent dim {} vs agent {}",
                z.len(),
                self.latent_dim
            )));
        }
        Ok(())
    }

    fn actor_input(&self, tape: &mut Tape, obs: &[f64], z: &[f64]) -> Result<Var> {
        let s = tape.input_vec(&self.schema.normalize_obs(obs));
        let zv = tape.input_vec(z);
        tape.concat(&[s, zv])
    }

    /// Squashed-Gaussian action and its log-probability, both on the tape.
    /// `eps` supplies the reparameterization noise; zeros give the mean
    /// action.
    fn continuous_policy_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        obs: &[f64],
        z: &[f64],
        eps: &[f64],
    ) -> Result<(Var, Var)> {
        let ActorNets::Continuous {
            trunk,
            head,
            scale,
            offset,
        } = &self.actor
        else {
            return Err(Error::Config("continuous policy on a discrete agent".into()));
        };
        let x = self.actor_input(tape, obs, z)?;
        let features = trunk.forward(tape, store, x)?;
        let (mean, std) = head.forward(tape, store, features)?;
        let epsv = tape.input_vec(eps);
        let noise = tape.mul(std, epsv)?;
        let u = tape.add(mean, noise)?;
        let unit = tape.tanh(u);
        let action = tape.affine_vec(unit, scale, offset)?;

        let dim = eps.len() as f64;
        let ln_std = tape.ln(std)?;
        let sum_ln_std = tape.sum(ln_std);
        // log N(u | mean, std) with u = mean + std*eps reduces to
        // -sum(ln std) - d/2 ln(2*pi) - sum(eps^2)/2.
        let gauss_const = -0.5 * LN_2PI * dim - 0.5 * eps.iter().map(|e| e * e).sum::<f64>();
        // Squash correction: sum over dims of
        // ln(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u)),
        // plus ln(scale) per dim for the range rescaling.
        let neg2u = tape.scale(u, -2.0);
        let sp = tape.softplus(neg2u);
        let u_plus_sp = tape.add(u, sp)?;
        let sum_u_plus_sp = tape.sum(u_plus_sp);
        let ln_scale_sum: f64 = scale.iter().map(|s| s.ln()).sum();

        let neg_ln_std = tape.neg(sum_ln_std);
        let corr = tape.scale(sum_u_plus_sp, 2.0);
        let partial = tape.add(neg_ln_std, corr)?;
        let log_prob = tape.add_const(partial, gauss_const - 2.0 * LN_2 * dim - ln_scale_sum);
        Ok((action, log_prob))
    }

    /// Log-probabilities over all discrete actions, on the tape.
    fn discrete_log_probs_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        obs: &[f64],
        z: &[f64],
    ) -> Result<Var> {
        let ActorNets::Discrete { logits, .. } = &self.actor else {
            return Err(Error::Config("discrete policy on a continuous agent".into()));
        };
        let x = self.actor_input(tape, obs, z)?;
        let raw = logits.forward(tape, store, x)?;
        tape.log_softmax(raw)
    }

    fn q_input_continuous(
        &self,
        tape: &mut Tape,
        obs: &[f64],
        action: Var,
        z: &[f64],
    ) -> Result<Var> {
        let s = tape.input_vec(&self.schema.normalize_obs(obs));
        let zv = tape.input_vec(z);
        tape.concat(&[s, action, zv])
    }

    fn q_input_discrete(&self, tape: &mut Tape, obs: &[f64], z: &[f64]) -> Result<Var> {
        let s = tape.input_vec(&self.schema.normalize_obs(obs));
        let zv = tape.input_vec(z);
        tape.concat(&[s, zv])
    }

    /// Samples an action with its log-probability.
    pub fn actor_sample(
        &self,
        obs: &[f64],
        z: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Action, f64)> {
        self.check_latent(z)?;
        match &self.actor {
            ActorNets::Continuous { scale, .. } => {
                let eps: Vec<f64> = (0..scale.len()).map(|_| standard_normal(rng)).collect();
                let mut tape = Tape::new();
                let (a, lp) =
                    self.continuous_policy_on_tape(&mut tape, &self.actor_store, obs, z, &eps)?;
                Ok((
                    Action::Continuous(tape.value(a).data().to_vec()),
                    tape.scalar_value(lp),
                ))
            }
            ActorNets::Discrete { n, .. } => {
                let mut tape = Tape::new();
                let lp = self.discrete_log_probs_on_tape(&mut tape, &self.actor_store, obs, z)?;
                let log_probs = tape.value(lp).data().to_vec();
                let u: f64 = rng.random_range(0.0..1.0);
                let mut cum = 0.0;
                let mut choice = n - 1;
                for (a, lp) in log_probs.iter().enumerate() {
                    cum += lp.exp();
                    if u < cum {
                        choice = a;
                        break;
                    }
                }
                Ok((Action::Discrete(choice), log_probs[choice]))
            }
        }
    }

    /// Mean (continuous) or highest-probability (discrete) action.
    pub fn act_deterministic(&self, obs: &[f64], z: &[f64]) -> Result<Action> {
        self.check_latent(z)?;
        match &self.actor {
            ActorNets::Continuous { scale, .. } => {
                let eps = vec![0.0; scale.len()];
                let mut tape = Tape::new();
                let (a, _) =
                    self.continuous_policy_on_tape(&mut tape, &self.actor_store, obs, z, &eps)?;
                Ok(Action::Continuous(tape.value(a).data().to_vec()))
            }
            ActorNets::Discrete { .. } => {
                let mut tape = Tape::new();
                let lp = self.discrete_log_probs_on_tape(&mut tape, &self.actor_store, obs, z)?;
                let log_probs = tape.value(lp).data();
                let best = log_probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                Ok(Action::Discrete(best))
            }
        }
    }

    /// Entropy-regularized state value under the slow target critics,
    /// used for Bellman targets. Plain value, no gradients.
    fn target_value(&self, obs: &[f64], z: &[f64], rng: &mut ChaCha8Rng) -> Result<f64> {
        let alpha = self.config.entropy_weight;
        match &self.actor {
            ActorNets::Continuous { scale, .. } => {
                let eps: Vec<f64> = (0..scale.len()).map(|_| standard_normal(rng)).collect();
                let mut tape = Tape::new();
                let (a, lp) =
                    self.continuous_policy_on_tape(&mut tape, &self.actor_store, obs, z, &eps)?;
                let qin = self.q_input_continuous(&mut tape, obs, a, z)?;
                let q1 = self.target_q1.forward(&mut tape, &self.target_store, qin)?;
                let q2 = self.target_q2.forward(&mut tape, &self.target_store, qin)?;
                let q = tape.scalar_value(q1).min(tape.scalar_value(q2));
                Ok(q - alpha * tape.scalar_value(lp))
            }
            ActorNets::Discrete { .. } => {
                let mut tape = Tape::new();
                let lp = self.discrete_log_probs_on_tape(&mut tape, &self.actor_store, obs, z)?;
                let qin = self.q_input_discrete(&mut tape, obs, z)?;
                let q1 = self.target_q1.forward(&mut tape, &self.target_store, qin)?;
                let q2 = self.target_q2.forward(&mut tape, &self.target_store, qin)?;
                let log_probs = tape.value(lp).data().to_vec();
                let q1 = tape.value(q1).data().to_vec();
                let q2 = tape.value(q2).data().to_vec();
                Ok(log_probs
                    .iter()
                    .zip(q1.iter().zip(&q2))
                    .map(|(lp, (a, b))| lp.exp() * (a.min(*b) - alpha * lp))
                    .sum())
            }
        }
    }

    /// Bellman regression targets, in `reward_scale` units.
    fn critic_targets(
        &self,
        batch: &[Transition],
        z: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let gamma = self.config.discount;
        let scale = self.schema.reward_scale;
        batch
            .iter()
            .map(|t| {
                let r = t.reward / scale;
                if t.terminal {
                    Ok(r)
                } else {
                    Ok(r + gamma * self.target_value(&t.next_state, z, rng)?)
                }
            })
            .collect()
    }

    /// Mean squared Bellman error of both critics against fixed targets.
    fn critic_loss_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &[Transition],
        targets: &[f64],
        z: &[f64],
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty critic batch".into()));
        }
        let mut p1 = Vec::with_capacity(batch.len());
        let mut p2 = Vec::with_capacity(batch.len());
        for t in batch {
            match &self.actor {
                ActorNets::Continuous { .. } => {
                    let a = match &t.action {
                        Action::Continuous(a) => a.clone(),
                        _ => return Err(Error::InvalidAction("discrete action in continuous batch".into())),
                    };
                    let av = tape.input_vec(&a);
                    let qin = self.q_input_continuous(tape, &t.state, av, z)?;
                    p1.push(self.q1.forward(tape, store, qin)?);
                    p2.push(self.q2.forward(tape, store, qin)?);
                }
                ActorNets::Discrete { .. } => {
                    let idx = match &t.action {
                        Action::Discrete(i) => *i,
                        _ => return Err(Error::InvalidAction("continuous action in discrete batch".into())),
                    };
                    let qin = self.q_input_discrete(tape, &t.state, z)?;
                    let all1 = self.q1.forward(tape, store, qin)?;
                    let all2 = self.q2.forward(tape, store, qin)?;
                    p1.push(tape.slice(all1, idx, 1)?);
                    p2.push(tape.slice(all2, idx, 1)?);
                }
            }
        }
        let q1 = tape.concat(&p1)?;
        let q2 = tape.concat(&p2)?;
        let y = tape.input_vec(targets);
        let l1 = tape.mse(q1, y)?;
        let l2 = tape.mse(q2, y)?;
        tape.add(l1, l2)
    }

    /// Expected `entropy_weight * log pi - Q` under the current policy.
    /// `noise` holds one frozen reparameterization draw per batch entry
    /// (ignored for discrete actions).
    fn actor_loss_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &[Transition],
        z: &[f64],
        noise: &[Vec<f64>],
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty actor batch".into()));
        }
        let alpha = self.config.entropy_weight;
        let mut terms = Vec::with_capacity(batch.len());
        for (i, t) in batch.iter().enumerate() {
            match &self.actor {
                ActorNets::Continuous { .. } => {
                    let (a, lp) =
                        self.continuous_policy_on_tape(tape, store, &t.state, z, &noise[i])?;
                    let qin = self.q_input_continuous(tape, &t.state, a, z)?;
                    let q1 = self.q1.forward(tape, &self.critic_store, qin)?;
                    let q2 = self.q2.forward(tape, &self.critic_store, qin)?;
                    let qmin = tape.min_elem(q1, q2)?;
                    let weighted = tape.scale(lp, alpha);
                    terms.push(tape.sub(weighted, qmin)?);
                }
                ActorNets::Discrete { .. } => {
                    let lp = self.discrete_log_probs_on_tape(tape, store, &t.state, z)?;
                    let qin = self.q_input_discrete(tape, &t.state, z)?;
                    let q1 = self.q1.forward(tape, &self.critic_store, qin)?;
                    let q2 = self.q2.forward(tape, &self.critic_store, qin)?;
                    let qmin = tape.min_elem(q1, q2)?;
                    let probs = tape.exp(lp);
                    let weighted = tape.scale(lp, alpha);
                    let diff = tape.sub(weighted, qmin)?;
                    terms.push(tape.dot(probs, diff)?);
                }
            }
        }
        let stacked = tape.concat(&terms)?;
        Ok(tape.mean(stacked))
    }

    fn draw_noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let dim = match &self.actor {
            ActorNets::Continuous { scale, .. } => scale.len(),
            ActorNets::Discrete { .. } => 0,
        };
        (0..n)
            .map(|_| (0..dim).map(|_| standard_normal(rng)).collect())
            .collect()
    }

    /// One optimization step. Each slot pairs a task latent with a batch
    /// drawn for it; the real slot is weighted by `real_weight`, the
    /// imagination slot by `imaginary_weight`, and both feed a single
    /// optimizer update per network.
    pub fn train_step(
        &mut self,
        real: Option<(&[f64], &[Transition])>,
        imagined: Option<(&[f64], &[Transition])>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SacLosses> {
        let mut groups: Vec<(f64, &[f64], &[Transition])> = Vec::new();
        if let Some((z, batch)) = real {
            self.check_latent(z)?;
            groups.push((self.config.real_weight, z, batch));
        }
        if let Some((z, batch)) = imagined {
            self.check_latent(z)?;
            groups.push((self.config.imaginary_weight, z, batch));
        }
        if groups.is_empty() {
            return Err(Error::InsufficientData("policy step without batches".into()));
        }

        let mut tape = Tape::new();
        let mut total: Option<Var> = None;
        for (w, z, batch) in &groups {
            let targets = self.critic_targets(batch, z, rng)?;
            let loss =
                self.critic_loss_on_tape(&mut tape, &self.critic_store, batch, &targets, z)?;
            let weighted = tape.scale(loss, *w);
            total = Some(match total {
                None => weighted,
                Some(t) => tape.add(t, weighted)?,
            });
        }
        let critic_total = total.unwrap();
        let critic_value = tape.scalar_value(critic_total);
        tape.backward(critic_total, &mut [&mut self.critic_store])?;
        self.critic_store.adam_step(self.config.lr)?;

        let mut tape = Tape::new();
        let mut total: Option<Var> = None;
        for (w, z, batch) in &groups {
            let noise = self.draw_noise(batch.len(), rng);
            let loss =
                self.actor_loss_on_tape(&mut tape, &self.actor_store, batch, z, &noise)?;
            let weighted = tape.scale(loss, *w);
            total = Some(match total {
                None => weighted,
                Some(t) => tape.add(t, weighted)?,
            });
        }
        let actor_total = total.unwrap();
        let actor_value = tape.scalar_value(actor_total);
        tape.backward(actor_total, &mut [&mut self.actor_store])?;
        self.actor_store.adam_step(self.config.lr)?;

        self.soft_update_target()?;
        Ok(SacLosses {
            critic: critic_value,
            actor: actor_value,
        })
    }

    /// Moves the target critics a step of `target_smoothing` towards the
    /// online critics.
    pub fn soft_update_target(&mut self) -> Result<()> {
        self.target_store
            .blend_from(&self.critic_store, self.config.target_smoothing)
    }

    /// Finite-difference verification of both loss heads on `batch`,
    /// returning the (critic, actor) reports. Target values and
    /// reparameterization draws are frozen from `seed` so the loss is a
    /// pure function of the parameters under test.
    pub fn gradient_check(
        &mut self,
        batch: &[Transition],
        z: &[f64],
        seed: u64,
    ) -> Result<(GradCheckReport, GradCheckReport)> {
        let targets = {
            let mut rng = crate::rng::rng_from_seed(seed);
            self.critic_targets(batch, z, &mut rng)?
        };
        let mut store = std::mem::replace(&mut self.critic_store, ParameterStore::new("critic"));
        let critic = finite_diff_check(
            |tape, stores| self.critic_loss_on_tape(tape, stores[0], batch, &targets, z),
            &mut [&mut store],
            1e-5,
        );
        self.critic_store = store;
        let critic = critic?;

        let noise = {
            let mut rng = crate::rng::rng_from_seed(seed.wrapping_add(1));
            self.draw_noise(batch.len(), &mut rng)
        };
        let mut store = std::mem::replace(&mut self.actor_store, ParameterStore::new("actor"));
        let actor = finite_diff_check(
            |tape, stores| self.actor_loss_on_tape(tape, stores[0], batch, z, &noise),
            &mut [&mut store],
            1e-5,
        );
        self.actor_store = store;
        Ok((critic, actor?))
    }
}

impl StatePolicy for SacAgent {
    fn sample_action(&mut self, obs: &[f64], z: &[f64], rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(self.actor_sample(obs, z, rng)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{schema_for, EnvId};
    use crate::nn::finite_diff_check;
    use crate::policy::Provenance;
    use crate::rng::{derive_rng, rng_from_seed};

    fn agent(env: EnvId, hidden: &[usize], seed: u64) -> SacAgent {
        let schema = schema_for(env);
        let config = SacConfig {
            hidden: hidden.to_vec(),
            ..SacConfig::default()
        };
        let mut rng = derive_rng(seed, "sac-test");
        SacAgent::new(&schema, 3, config, &mut rng).unwrap()
    }

    fn fake_batch(env: EnvId, n: usize, terminal: bool, reward: f64, seed: u64) -> Vec<Transition> {
        let schema = schema_for(env);
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                let state = crate::env::sample_initial_state(env, &mut rng);
                let next_state = crate::env::sample_initial_state(env, &mut rng);
                let action = match &schema.action {
                    ActionSpace::Continuous { dim, .. } => Action::Continuous(
                        (0..*dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    ),
                    ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..*n)),
                };
                Transition {
                    state,
                    action,
                    reward,
                    next_state,
                    terminal,
                    provenance: Provenance::Real,
                }
            })
            .collect()
    }

    fn zero_store(store: &mut ParameterStore) {
        let names: Vec<String> = store.entries().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let shape = store.value(store.id_of(&name).unwrap()).shape();
            store
                .set_value(&name, crate::tensor::Tensor::zeros(shape.0, shape.1))
                .unwrap();
        }
    }

    #[test]
    fn continuous_actions_stay_in_bounds() {
        let agent = agent(EnvId::Nav2d, &[16, 16], 1);
        let mut rng = rng_from_seed(2);
        for _ in 0..100 {
            let obs = [3.9, -3.9];
            let (a, lp) = agent.actor_sample(&obs, &[0.5, -0.5, 0.0], &mut rng).unwrap();
            let Action::Continuous(a) = a else { panic!() };
            assert!(a.iter().all(|v| v.abs() <= 1.0));
            assert!(lp.is_finite());
        }
    }

    #[test]
    fn deterministic_action_is_repeatable_and_stochastic_varies() {
        let agent = agent(EnvId::Nav2d, &[16, 16], 3);
        let obs = [0.2, 0.4];
        let z = [0.1, 0.2, 0.3];
        let a1 = agent.act_deterministic(&obs, &z).unwrap();
        let a2 = agent.act_deterministic(&obs, &z).unwrap();
        assert_eq!(a1, a2);
        let mut rng = rng_from_seed(4);
        let (s1, _) = agent.actor_sample(&obs, &z, &mut rng).unwrap();
        let (s2, _) = agent.actor_sample(&obs, &z, &mut rng).unwrap();
        assert_ne!(s1, s2);
    }

    #[test]
    fn discrete_log_probs_are_normalized_and_nonpositive() {
        let agent = agent(EnvId::Highway, &[16, 16], 5);
        let mut rng = rng_from_seed(6);
        let obs = crate::env::sample_initial_state(EnvId::Highway, &mut rng);
        let mut tape = Tape::new();
        let lp = agent
            .discrete_log_probs_on_tape(&mut tape, &agent.actor_store, &obs, &[0.0, 0.0, 0.0])
            .unwrap();
        let lps = tape.value(lp).data().to_vec();
        assert!((lps.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(lps.iter().all(|l| *l <= 0.0));
        let (_, lp) = agent.actor_sample(&obs, &[0.0, 0.0, 0.0], &mut rng).unwrap();
        assert!(lp <= 0.0);
    }

    #[test]
    fn zeroed_critic_with_terminal_batch_gives_exact_loss() {
        let mut agent = agent(EnvId::CartPole, &[8], 7);
        zero_store(&mut agent.critic_store);
        let mut rng = rng_from_seed(8);

        let batch = fake_batch(EnvId::CartPole, 6, true, 0.0, 9);
        let targets = agent.critic_targets(&batch, &[0.0; 3], &mut rng).unwrap();
        let mut tape = Tape::new();
        let loss = agent
            .critic_loss_on_tape(&mut tape, &agent.critic_store, &batch, &targets, &[0.0; 3])
            .unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);

        let batch = fake_batch(EnvId::CartPole, 6, true, 1.5, 10);
        let targets = agent.critic_targets(&batch, &[0.0; 3], &mut rng).unwrap();
        assert!(targets.iter().all(|y| (y - 1.5).abs() < 1e-15));
        let mut tape = Tape::new();
        let loss = agent
            .critic_loss_on_tape(&mut tape, &agent.critic_store, &batch, &targets, &[0.0; 3])
            .unwrap();
        assert!((tape.scalar_value(loss) - 2.0 * 1.5 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_policy_with_flat_q_is_a_fixed_point() {
        let mut agent = agent(EnvId::CartPole, &[8], 11);
        zero_store(&mut agent.critic_store);
        zero_store(&mut agent.actor_store);
        let batch = fake_batch(EnvId::CartPole, 4, false, 1.0, 12);
        let noise = vec![Vec::new(); batch.len()];
        let mut tape = Tape::new();
        let loss = agent
            .actor_loss_on_tape(&mut tape, &agent.actor_store, &batch, &[0.0; 3], &noise)
            .unwrap();
        tape.backward(loss, &mut [&mut agent.actor_store]).unwrap();
        let store = &agent.actor_store;
        for i in 0..store.n_tensors() {
            let id = store.id_of_index(i);
            assert!(store.grad(id).data().iter().all(|g| g.abs() < 1e-12));
        }
    }

    #[test]
    fn raising_q_for_one_action_raises_its_probability() {
        let mut agent = agent(EnvId::CartPole, &[8], 14);
        let obs = [0.1, 0.0, 0.02, 0.0];
        let z = [0.0, 0.0, 0.0];

        let prob_of = |agent: &SacAgent| {
            let mut tape = Tape::new();
            let lp = agent
                .discrete_log_probs_on_tape(&mut tape, &agent.actor_store, &obs, &z)
                .unwrap();
            tape.value(lp).data()[0].exp()
        };
        let before = prob_of(&agent);

        // Push both critics sharply up for action 0 via the output bias.
        for net in ["policy.q1", "policy.q2"] {
            let name = format!("{net}.layer1.bias");
            let id = agent.critic_store.id_of(&name).unwrap();
            let mut bias = agent.critic_store.value(id).clone();
            bias.data_mut()[0] += 10.0;
            agent.critic_store.set_value(&name, bias).unwrap();
        }

        let batch = vec![fake_batch(EnvId::CartPole, 1, false, 1.0, 15)[0].clone()];
        let mut single = Vec::new();
        for mut t in batch {
            t.state = obs.to_vec();
            single.push(t);
        }
        let noise = vec![Vec::new(); single.len()];
        for _ in 0..20 {
            let mut tape = Tape::new();
            let loss = agent
                .actor_loss_on_tape(&mut tape, &agent.actor_store, &single, &z, &noise)
                .unwrap();
            tape.backward(loss, &mut [&mut agent.actor_store]).unwrap();
            agent.actor_store.adam_step(0.01).unwrap();
        }
        assert!(prob_of(&agent) > before);
    }

    #[test]
    fn target_updates_converge_to_online_critics() {
        let mut agent = agent(EnvId::Nav2d, &[8], 17);
        assert_eq!(
            agent.target_store.content_hash(),
            agent.critic_store.content_hash()
        );
        let id = agent.critic_store.id_of("policy.q1.layer0.bias").unwrap();
        let mut bias = agent.critic_store.value(id).clone();
        bias.data_mut()[0] = 5.0;
        agent
            .critic_store
            .set_value("policy.q1.layer0.bias", bias)
            .unwrap();
        let before = agent.target_store.content_hash();
        for _ in 0..4000 {
            agent.soft_update_target().unwrap();
        }
        assert_ne!(agent.target_store.content_hash(), before);
        let tid = agent.target_store.id_of("policy.q1.layer0.bias").unwrap();
        let drifted = agent.target_store.value(tid).data()[0];
        assert!((drifted - 5.0).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for env in [EnvId::Nav2d, EnvId::CartPole] {
            let mut agent = agent(env, &[6], 18);
            let batch = fake_batch(env, 3, false, 0.5, 19);
            let z = [0.2, -0.1, 0.4];
            let targets = {
                let mut rng = rng_from_seed(20);
                agent.critic_targets(&batch, &z, &mut rng).unwrap()
            };

            let mut store =
                std::mem::replace(&mut agent.critic_store, ParameterStore::new("critic"));
            let report = finite_diff_check(
                |tape, stores| agent.critic_loss_on_tape(tape, stores[0], &batch, &targets, &z),
                &mut [&mut store],
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "critic {env:?}: {report:?}");
            agent.critic_store = store;

            let noise = {
                let mut rng = rng_from_seed(21);
                agent.draw_noise(batch.len(), &mut rng)
            };
            let mut store =
                std::mem::replace(&mut agent.actor_store, ParameterStore::new("actor"));
            let report = finite_diff_check(
                |tape, stores| agent.actor_loss_on_tape(tape, stores[0], &batch, &z, &noise),
                &mut [&mut store],
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "actor {env:?}: {report:?}");
            agent.actor_store = store;
        }
    }

    #[test]
    fn train_step_runs_on_both_action_kinds_and_stays_finite() {
        for env in [EnvId::Nav2d, EnvId::Highway] {
            let mut agent = agent(env, &[16, 16], 21);
            let real = fake_batch(env, 8, false, 0.3, 22);
            let imag = fake_batch(env, 8, false, 0.1, 23);
            let z = [0.1, 0.2, -0.3];
            let mut rng = rng_from_seed(24);
            for _ in 0..3 {
                let losses = agent
                    .train_step(Some((&z, &real)), Some((&z, &imag)), &mut rng)
                    .unwrap();
                assert!(losses.critic.is_finite());
                assert!(losses.actor.is_finite());
            }
            assert!(agent
                .train_step(None, None, &mut rng)
                .is_err());
        }
    }
}
