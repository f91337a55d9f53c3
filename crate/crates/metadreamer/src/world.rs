//! Task-conditioned generative world model.
//!
//! The model factors into a transition head and a reward head, both fed
//! with `(normalised state, encoded action, latent z)`. The reward head is
//! a plain network. The transition head is physics-informed: a
//! [`PhysicsTemplate`] declares which observation dimensions belong to
//! which physical entity, gives the network outputs physical meaning as
//! bounded acceleration nodes, and advances positions and velocities with
//! the same explicit-Euler helpers the simulators use. Dimensions the
//! template can compute outright never touch a network at all, so for
//! those dimensions the model is exact by construction.

use rand_chacha::ChaCha8Rng;

use crate::env::{
    cartpole, highway, nav2d, Action, EnvId, EnvSchema, RandomWalkExplorer,
};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpSpec, OutputSquash, ParameterStore, Tape, Var};
use crate::policy::{Provenance, Transition};

/// Reward head range in `reward_scale` units.
const REWARD_BOUND: f64 = 4.0;

/// A network output with a physical meaning and a hard range,
/// enforced by `bound * tanh`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SemanticNode {
    pub name: String,
    pub bound: f64,
}

/// A named group of observation dimensions belonging to one entity.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PartitionGroup {
    pub name: String,
    pub dims: Vec<usize>,
}

/// Which analytic integrator assembles the next state from the nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum IntegratorKind {
    /// Position fully determined by the velocity action; no nodes.
    Nav2dAnalytic,
    /// Nodes `(cart_accel, pole_accel)`; Euler on both coordinate pairs.
    CartPoleEuler,
    /// One acceleration node per neighbour; ego motion follows the action.
    HighwayAccel,
    /// No physics: nodes are the whole normalised next state.
    Direct,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhysicsTemplate {
    pub env: EnvId,
    pub kind: IntegratorKind,
    pub partition: Vec<PartitionGroup>,
    pub nodes: Vec<SemanticNode>,
}

impl PhysicsTemplate {
    /// The physics-informed template for an environment family.
    pub fn for_env(env: EnvId) -> Self {
        match env {
            EnvId::Nav2d => PhysicsTemplate {
                env,
                kind: IntegratorKind::Nav2dAnalytic,
                partition: vec![PartitionGroup {
                    name: "position".into(),
                    dims: vec![0, 1],
                }],
                nodes: vec![],
            },
            EnvId::CartPole => PhysicsTemplate {
                env,
                kind: IntegratorKind::CartPoleEuler,
                partition: vec![
                    PartitionGroup {
                        name: "cart".into(),
                        dims: vec![0, 1],
                    },
                    PartitionGroup {
                        name: "pole".into(),
                        dims: vec![2, 3],
                    },
                ],
                nodes: vec![
                    SemanticNode {
                        name: "cart_accel".into(),
                        bound: 20.0,
                    },
                    SemanticNode {
                        name: "pole_accel".into(),
                        bound: 20.0,
                    },
                ],
            },
            EnvId::Highway => {
                let mut partition = vec![PartitionGroup {
                    name: "ego".into(),
                    dims: (0..4).collect(),
                }];
                let mut nodes = Vec::new();
                for j in 0..highway::N_NEIGHBORS {
                    partition.push(PartitionGroup {
                        name: format!("neighbor{j}"),
                        dims: (4 + 4 * j..8 + 4 * j).collect(),
                    });
                    nodes.push(SemanticNode {
                        name: format!("n{j}_accel"),
                        bound: highway::NEIGHBOR_ACCEL_BOUND,
                    });
                }
                PhysicsTemplate {
                    env,
                    kind: IntegratorKind::HighwayAccel,
                    partition,
                    nodes,
                }
            }
        }
    }

    /// Ablation template: the network regresses the normalised next state
    /// directly and no physics is applied.
    pub fn no_physics(env: EnvId) -> Self {
        let schema = crate::env::schema_for(env);
        PhysicsTemplate {
            env,
            kind: IntegratorKind::Direct,
            partition: vec![PartitionGroup {
                name: "state".into(),
                dims: (0..schema.obs_dim()).collect(),
            }],
            nodes: schema
                .obs
                .iter()
                .map(|d| SemanticNode {
                    name: format!("next_{}", d.name),
                    bound: 1.2,
                })
                .collect(),
        }
    }

    /// Every observation dimension covered exactly once; all bounds
    /// finite and positive.
    pub fn validate(&self, schema: &EnvSchema) -> Result<()> {
        if self.env != schema.id {
            return Err(Error::Config(format!(
                "template for {} used with {}",
                self.env, schema.id
            )));
        }
        let mut seen = vec![0usize; schema.obs_dim()];
        for group in &self.partition {
            for &d in &group.dims {
                if d >= seen.len() {
                    return Err(Error::Config(format!(
                        "partition `{}` references dim {d} beyond obs dim {}",
                        group.name,
                        seen.len()
                    )));
                }
                seen[d] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Config(
                "partition must cover every observation dim exactly once".into(),
            ));
        }
        for node in &self.nodes {
            if !node.bound.is_finite() || node.bound <= 0.0 {
                return Err(Error::Config(format!(
                    "node `{}` needs a finite positive bound",
                    node.name
                )));
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn node_bounds(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.bound).collect()
    }
}

/// Anything that can choose actions during an imagined rollout.
pub trait StatePolicy {
    fn sample_action(&mut self, obs: &[f64], z: &[f64], rng: &mut ChaCha8Rng) -> Result<Action>;
}

impl StatePolicy for RandomWalkExplorer {
    fn sample_action(&mut self, _obs: &[f64], _z: &[f64], rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(self.act(rng))
    }
}

pub struct WorldModel {
    schema: EnvSchema,
    template: PhysicsTemplate,
    latent_dim: usize,
    transition_net: Option<Mlp>,
    reward_net: Mlp,
}

impl WorldModel {
    pub fn new(
        store: &mut ParameterStore,
        schema: &EnvSchema,
        template: PhysicsTemplate,
        latent_dim: usize,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        template.validate(schema)?;
        let input_dim = schema.obs_dim() + schema.action.encoded_dim() + latent_dim;
        let transition_net = if template.n_nodes() > 0 {
            Some(Mlp::new(
                store,
                "world.transition",
                MlpSpec::new(input_dim, hidden, template.n_nodes()),
                rng,
            )?)
        } else {
            None
        };
        let reward_net = Mlp::new(
            store,
            "world.reward",
            MlpSpec::new(input_dim, hidden, 1).with_squash(OutputSquash::BoundedTanh(REWARD_BOUND)),
            rng,
        )?;
        Ok(WorldModel {
            schema: schema.clone(),
            template,
            latent_dim,
            transition_net,
            reward_net,
        })
    }

    pub fn template(&self) -> &PhysicsTemplate {
        &self.template
    }

    pub fn schema(&self) -> &EnvSchema {
        &self.schema
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn check_dims(&self, s: &[f64], z_len: usize) -> Result<()> {
        if s.len() != self.schema.obs_dim() {
            return Err(Error::Shape(format!(
                "state dim {} vs schema {}",
                s.len(),
                self.schema.obs_dim()
            )));
        }
        if z_len != self.latent_dim {
            return Err(Error::Shape(format!(
                "latent dim {z_len} vs model {}",
                self.latent_dim
            )));
        }
        Ok(())
    }

    fn model_input(&self, tape: &mut Tape, s: &[f64], action: &Action, z: Var) -> Result<Var> {
        let norm = self.schema.normalize_obs(s);
        let sv = tape.input_vec(&norm);
        let av = tape.input_vec(&self.schema.encode_action(action)?);
        tape.concat(&[sv, av, z])
    }

    /// Bounded semantic nodes for `(s, a, z)`, or `None` when the template
    /// is fully analytic.
    pub fn nodes_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        s: &[f64],
        action: &Action,
        z: Var,
    ) -> Result<Option<Var>> {
        self.check_dims(s, tape.value(z).len())?;
        let Some(net) = &self.transition_net else {
            return Ok(None);
        };
        let x = self.model_input(tape, s, action, z)?;
        let raw = net.forward(tape, store, x)?;
        let squashed = tape.tanh(raw);
        let bounds = self.template.node_bounds();
        Ok(Some(tape.affine_vec(
            squashed,
            &bounds,
            &vec![0.0; bounds.len()],
        )?))
    }

    /// Assembles the next state from semantic node values. For dimensions
    /// the template computes analytically this reproduces the simulator
    /// arithmetic operation for operation, so equal node inputs give a
    /// bit-identical result.
    pub fn integrate_nodes_on_tape(
        &self,
        tape: &mut Tape,
        s: &[f64],
        action: &Action,
        nodes: Option<Var>,
    ) -> Result<Var> {
        self.schema.validate_action(action)?;
        match self.template.kind {
            IntegratorKind::Nav2dAnalytic => {
                let a = match action {
                    Action::Continuous(a) => a,
                    _ => unreachable!("validated"),
                };
                let next: Vec<f64> = (0..2)
                    .map(|i| {
                        crate::env::clip(
                            crate::env::integrate_position(s[i], a[i], nav2d::DT),
                            -nav2d::BOUND,
                            nav2d::BOUND,
                        )
                    })
                    .collect();
                Ok(tape.input_vec(&next))
            }
            IntegratorKind::CartPoleEuler => {
                let nodes = nodes.ok_or_else(|| Error::Shape("cartpole template needs nodes".into()))?;
                let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
                let x_next = crate::env::clip(
                    crate::env::integrate_position(x, x_dot, cartpole::DT),
                    -cartpole::X_LIMIT,
                    cartpole::X_LIMIT,
                );
                let theta_next = crate::env::clip(
                    crate::env::integrate_position(theta, theta_dot, cartpole::DT),
                    -cartpole::THETA_LIMIT,
                    cartpole::THETA_LIMIT,
                );
                let vel = |tape: &mut Tape, node_index: usize, v0: f64| -> Result<Var> {
                    let n = tape.slice(nodes, node_index, 1)?;
                    let dv = tape.scale(n, cartpole::DT);
                    let v = tape.add_const(dv, v0);
                    Ok(tape.clamp(v, -cartpole::VEL_LIMIT, cartpole::VEL_LIMIT))
                };
                let x_dot_next = vel(tape, 0, x_dot)?;
                let theta_dot_next = vel(tape, 1, theta_dot)?;
                let xp = tape.input_vec(&[x_next]);
                let tp = tape.input_vec(&[theta_next]);
                tape.concat(&[xp, x_dot_next, tp, theta_dot_next])
            }
            IntegratorKind::HighwayAccel => {
                let nodes = nodes.ok_or_else(|| Error::Shape("highway template needs nodes".into()))?;
                let a_idx = match action {
                    Action::Discrete(a) => *a,
                    _ => unreachable!("validated"),
                };
                let ego_accel = highway::ego_accel_command(a_idx);
                // Dimensions that do not depend on the neighbour
                // accelerations come straight from the shared integrator.
                let base =
                    highway::integrate_highway_observation(s, a_idx, ego_accel, &[0.0; 4]);
                let ego_dv = base[2] - s[2];
                let vx = s[2];
                let mut pieces = Vec::with_capacity(1 + 3 * highway::N_NEIGHBORS);
                pieces.push(tape.input_vec(&base[0..4]));
                for j in 0..highway::N_NEIGHBORS {
                    let b = 4 + 4 * j;
                    let dvx = s[b + 2];
                    let v_j = vx + dvx;
                    let n = tape.slice(nodes, j, 1)?;
                    let dv_step = tape.scale(n, highway::DT);
                    let vj_next_raw = tape.add_const(dv_step, v_j);
                    let vj_next = tape.clamp(vj_next_raw, 0.0, 50.0);
                    let dv_j = tape.add_const(vj_next, -v_j);
                    let rel = tape.add_const(dv_j, -ego_dv);
                    let sum = tape.add_const(rel, dvx);
                    let dvx_next = tape.clamp(sum, -20.0, 20.0);
                    let head = tape.input_vec(&base[b..b + 2]);
                    let tail = tape.input_vec(&base[b + 3..b + 4]);
                    pieces.push(head);
                    pieces.push(dvx_next);
                    pieces.push(tail);
                }
                tape.concat(&pieces)
            }
            IntegratorKind::Direct => {
                let nodes = nodes.ok_or_else(|| Error::Shape("direct template needs nodes".into()))?;
                let (scale, offset) = self.schema.normalization_affine();
                // Invert the normalisation, then keep the result inside
                // the declared ranges like every simulator does.
                let inv_scale: Vec<f64> = scale.iter().map(|s| 1.0 / s).collect();
                let inv_offset: Vec<f64> = offset
                    .iter()
                    .zip(&inv_scale)
                    .map(|(o, inv)| -o * inv)
                    .collect();
                let raw = tape.affine_vec(nodes, &inv_scale, &inv_offset)?;
                tape.clamp_vec(raw, &self.schema.obs_lo(), &self.schema.obs_hi())
            }
        }
    }

    /// Value-domain semantic node readout; empty for analytic templates.
    pub fn predict_nodes(
        &self,
        store: &ParameterStore,
        s: &[f64],
        action: &Action,
        z: &[f64],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let zv = tape.input_vec(z);
        Ok(match self.nodes_on_tape(&mut tape, store, s, action, zv)? {
            Some(nodes) => tape.value(nodes).data().to_vec(),
            None => Vec::new(),
        })
    }

    /// Next-state prediction on the tape, in raw observation units.
    pub fn predict_transition_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        s: &[f64],
        action: &Action,
        z: Var,
    ) -> Result<Var> {
        let nodes = self.nodes_on_tape(tape, store, s, action, z)?;
        self.integrate_nodes_on_tape(tape, s, action, nodes)
    }

    /// Value-domain next-state prediction.
    pub fn predict_transition(
        &self,
        store: &ParameterStore,
        s: &[f64],
        action: &Action,
        z: &[f64],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let zv = tape.input_vec(z);
        let out = self.predict_transition_on_tape(&mut tape, store, s, action, zv)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Next state for externally supplied node values; the physics
    /// exactness tests drive this with simulator-reported accelerations.
    pub fn integrate_with_nodes(
        &self,
        s: &[f64],
        action: &Action,
        node_values: &[f64],
    ) -> Result<Vec<f64>> {
        if node_values.len() != self.template.n_nodes() {
            return Err(Error::Shape(format!(
                "{} node values for template with {}",
                node_values.len(),
                self.template.n_nodes()
            )));
        }
        let mut tape = Tape::new();
        let nodes = if node_values.is_empty() {
            None
        } else {
            Some(tape.input_vec(node_values))
        };
        let out = self.integrate_nodes_on_tape(&mut tape, s, action, nodes)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Reward prediction on the tape, in `reward_scale` units (the same
    /// units the reconstruction loss compares in).
    pub fn predict_reward_scaled_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        s: &[f64],
        action: &Action,
        z: Var,
    ) -> Result<Var> {
        self.check_dims(s, tape.value(z).len())?;
        let x = self.model_input(tape, s, action, z)?;
        self.reward_net.forward(tape, store, x)
    }

    /// Value-domain reward prediction in raw reward units.
    pub fn predict_reward(
        &self,
        store: &ParameterStore,
        s: &[f64],
        action: &Action,
        z: &[f64],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let zv = tape.input_vec(z);
        let out = self.predict_reward_scaled_on_tape(&mut tape, store, s, action, zv)?;
        Ok(tape.scalar_value(out) * self.schema.reward_scale)
    }

    /// Dreams a trajectory of `horizon` steps from `s0` under `policy`,
    /// conditioned on the latent `z`. States stay inside the declared
    /// observation ranges; any non-finite prediction aborts the rollout.
    pub fn imagine_rollout(
        &self,
        store: &ParameterStore,
        policy: &mut dyn StatePolicy,
        z: &[f64],
        s0: &[f64],
        horizon: usize,
        provenance: Provenance,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Transition>> {
        if horizon == 0 {
            return Err(Error::Config("imagination horizon must be >= 1".into()));
        }
        self.check_dims(s0, z.len())?;
        let mut s = s0.to_vec();
        self.schema.clip_obs(&mut s);
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let action = policy.sample_action(&s, z, rng)?;
            let next = self.predict_transition(store, &s, &action, z)?;
            let reward = self.predict_reward(store, &s, &action, z)?;
            if !reward.is_finite() || next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("imagined rollout prediction".into()));
            }
            out.push(Transition {
                state: s.clone(),
                action,
                reward,
                next_state: next.clone(),
                terminal: false,
                provenance,
            });
            s = next;
        }
        Ok(out)
    }
}
