//! Bernoulli synaptic sampling of feed-forward networks.
//!
//! Train a weight-constrained network ([`trainer`]), split its weights into
//! coin probabilities ([`sampler`]), run K sampled forward passes per input
//! and summarize the votes ([`analytics`]).

pub mod analytics;
pub mod data;
pub mod error;
pub mod math;
pub mod model;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
pub use math::{ActivationKind, Matrix, Vector};
pub use model::{load_model, save_model, LayerParams, NetworkMeta, NetworkSpec};
