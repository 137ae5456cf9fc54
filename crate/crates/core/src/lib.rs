//! Federated learning simulation with entropy-weighted aggregation and
//! gradient-geometry client selection, plus an exact verifier for
//! self-information weighted generalization bounds on small finite worlds.

pub mod aggregation;
pub mod bounds;
pub mod data;
pub mod hull;
pub mod info;
pub mod models;
pub mod orchestrator;
pub mod seed;
pub mod selection;
