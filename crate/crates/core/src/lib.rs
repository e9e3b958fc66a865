//! Deterministic CNN training engine and federated-learning simulator with
//! noise-infusion mechanisms and a privacy/stability metric suite.

pub mod data;
pub mod error;
pub mod experiments;
pub mod federated;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod par;
pub mod rng;
pub mod spec;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
