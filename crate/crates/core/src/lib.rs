//! Temporal metric distillation: tabular oracles, distance operators,
//! quasimetric critics and offline training.

pub mod baseline;
pub mod critic;
pub mod distance;
pub mod env;
pub mod loss;
pub mod mdp;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod presets;
pub mod rng;
pub mod train;
pub mod verify;
