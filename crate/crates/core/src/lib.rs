//! deepGCFX: a graph variational autoencoder that splits a graph's
//! representation into a common (graph-level) factor and local (node-level)
//! factors through iterative query-based accumulation.

pub mod accum;
pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod graph_data;
pub mod gru;
pub mod latent;
pub mod model;
pub mod optim;
pub mod params;
pub mod sparse;
pub mod synthetic;
pub mod trainer;

pub use error::{GcfxError, Result};
