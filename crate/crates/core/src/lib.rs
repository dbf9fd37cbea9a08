//! Offline batch-constrained Q-learning with a one-step model-based rollout
//! for joint beam selection and power control in a two-cell mmWave downlink.

pub mod error;
pub mod radio;
pub mod env;
pub mod container;
pub mod nn;
pub mod repro;
pub mod dataset;
pub mod eval;
pub mod agents;
pub mod cli;

pub use error::{Error, FormatError, Result};
