//! Deterministic simulation of hierarchical federated training of tiny
//! language models.

pub mod aggregation;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod model;
pub mod privacy;
pub mod residual;
pub mod rng;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
