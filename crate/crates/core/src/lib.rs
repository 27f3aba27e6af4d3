//! Simulator for gradient assembly poisoning (GAP) against federated LoRA
//! fine-tuning with decoupled `A`/`B` aggregation.

pub mod analysis;
pub mod artifacts;
pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod defenses;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod lora;
pub mod matrix;
pub mod parallel;
pub mod projection;
pub mod rng;
pub mod task;

pub use error::{Error, Result};
