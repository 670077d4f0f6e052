//! Variational hierarchical autoencoder for goal-oriented dialogs.

pub mod corpus;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod latent;
pub mod model;
pub mod nn;
pub mod objective;
pub mod sampler;
pub mod trainer;

pub use error::{Result, VhdaError};
