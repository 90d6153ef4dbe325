//! Class-incremental learning without storing raw images.
//!
//! Each increment trains a classifier on new classes while replaying images
//! decoded from compact autoencoder embeddings ("encoded episodes"). When the
//! episode store exceeds its budget, nearby episodes are merged into
//! Gaussian concepts (centroid plus diagonal covariance) that are sampled and
//! decoded into pseudo-images later on.

pub mod data;
pub mod error;
pub mod figure3;
pub mod memory;
pub mod models;
pub mod nn;
pub mod nst;
pub mod rehearsal;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
