//! The meta-training loop and its configuration: real-data collection,
//! joint encoder-decoder updates, imagination, and policy improvement.

mod config;
mod losses;
mod run;

pub use config::TrainConfig;
pub use losses::{cluster_losses, ed_step, elbo_on_tape, ElboTerms, ElboWeights, TaskEdData};
pub use run::{IterationLog, RunArtifacts, Trainer, METRICS_HEADER};
