//! Deterministic simulator and learning stack for slotted underwater
//! acoustic networks: per-node recurrent Q-learning power control, sink-side
//! federated parameter averaging, reference baselines, and a seeded what-if
//! evaluation twin.

pub mod agent;
pub mod baselines;
pub mod channel;
pub mod config;
pub mod env;
pub mod federation;
pub mod neural;
pub mod report;
pub mod seeds;
pub mod topology;
pub mod twin;
