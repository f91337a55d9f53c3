//! MetaDreamer: a small meta-reinforcement-learning laboratory.
//!
//! The pieces, bottom to top:
//!
//! * [`nn`]: a reverse-mode tape over `f64` tensors with named parameter
//!   stores, Adam, and finite-difference gradient checking.
//! * [`env`]: three task families (point navigation, pole balancing,
//!   highway merging) that expose their hidden generative factors for
//!   evaluation.
//! * [`infer`]: a recurrent task encoder producing Gaussian posteriors
//!   over a latent task variable.
//! * [`world`]: a physics-informed generative model that predicts
//!   bounded accelerations and integrates them with the same arithmetic
//!   as the simulators.
//! * [`imagine`]: latent-space interpolation between inferred tasks,
//!   yielding imaginary tasks to dream training data for.
//! * [`policy`]: a latent-conditioned soft actor-critic with replay
//!   buffers that track where each transition came from.
//! * [`train`]: the meta-training loop tying the above together, plus
//!   adaptation at meta-test time.
//! * [`metrics`]: disentanglement, clustering, reconstruction, factor
//!   speculation, and imagination-consistency scores with plot output.

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod imagine;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod train;
pub mod world;

mod rng;
mod tensor;

pub use env::{
    make_env, make_env_with, sample_task_specs, schema_for, Action, ActionSpace, EnvId,
    EnvOptions, EnvSchema, EnvState, Environment, TaskSpec,
};
pub use error::{Error, Result};
pub use imagine::{FactorMap, FactorSweep, ImaginaryTask, InterpolationType};
pub use infer::{ContextTuple, LatentPosterior, TaskEncoder};
pub use nn::{finite_diff_check, GruSpec, MlpSpec, ParamId, ParameterStore, Tape, Var};
pub use policy::{Provenance, ReplayBuffer, SacAgent, SacConfig, Transition};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StoreSnapshot};
pub use metrics::{Measured, MetricReport, ProbeConfig};
pub use rng::{derive_rng, rng_from_seed};
pub use train::{IterationLog, RunArtifacts, TrainConfig, Trainer};
pub use tensor::Tensor;
pub use world::{PhysicsTemplate, StatePolicy, WorldModel};
