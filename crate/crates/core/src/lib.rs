//! Self-supervised latent-prediction pre-training for particle jets.
//!
//! Jets are tokenized into particle groups, split into context and target
//! regions, and a student transformer learns to predict the EMA teacher's
//! embeddings of the targets from the context.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod jepa;
pub mod jetdata;
pub mod masking;
pub mod nn;
pub mod params;
pub mod plot;
pub mod rng;
pub mod tokenizer;

pub use error::{Error, Result};
