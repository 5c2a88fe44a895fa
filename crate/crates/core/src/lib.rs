//! Dialogue response generation with a K-way discrete latent variable.
//!
//! One transformer serves two roles: a bi-directional pass that recognises
//! the latent act behind a (context, response) pair, and a uni-directional
//! pass that generates a response conditioned on a chosen latent. At
//! inference time one candidate is decoded per latent value and a coherence
//! head picks the best.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod representation;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
