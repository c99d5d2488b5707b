//! Retrieval-augmented decision transformer for in-context reinforcement
//! learning on sparse-reward grid worlds.

pub mod datagen;
pub mod embed;
pub mod envs;
pub mod memory;
pub mod error;
pub mod harness;
pub mod policy;
pub mod seeds;
pub mod traj;

pub use error::{RadtError, Result};
