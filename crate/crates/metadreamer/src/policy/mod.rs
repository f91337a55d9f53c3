//! Task-conditioned policy learning: replay storage and the soft
//! actor-critic that consumes it.

mod buffer;
mod sac;

pub use buffer::{Provenance, ReplayBuffer, Transition};
pub use sac::{SacAgent, SacConfig, SacLosses};
