//! Hybrid 6-DoF grasp planning for bin picking: a learned planar reward grid
//! combined with an analytic controller for the two lateral tool angles.

pub mod collision;
pub mod error;
pub mod grasp_sim;
pub mod heightmap;
pub mod imaging;
pub mod lateral_controller;
pub mod policy;
pub mod reward_model;
pub mod rng;
pub mod scene;
mod serde_nan;

pub use error::{Error, Result};
pub use heightmap::Heightmap;
