//! Neural-network kernel: a reverse-mode tape over [`Tensor`](crate::Tensor)
//! values, named parameter stores with Adam state, small layer types, and a
//! finite-difference gradient checker.
//!
//! The tape is rebuilt for every forward pass. That costs allocations but
//! buys a property the training code leans on everywhere: gradients flow to
//! exactly the parameter stores named in the `backward` call and nowhere
//! else, so detaching the latent from the policy loss, or keeping the actor
//! update away from the critics, is a routing decision instead of a
//! convention.

mod gradcheck;
mod layers;
mod store;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layers::{Activation, GaussianHead, GruCell, GruSpec, Mlp, MlpSpec, OutputSquash};
pub use store::{ParamId, ParameterStore};
pub use tape::{Tape, Var};

/// Adam moment decay and stabiliser defaults used by every training phase.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
