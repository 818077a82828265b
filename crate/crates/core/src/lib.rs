//! Latent planning pipeline at desk scale.
//!
//! Plans are distilled (or generated) per reasoning step, compressed into
//! short sequences of discrete codebook indices by a memory-token VQ
//! autoencoder, and written into fine-tuning records as extended-vocabulary
//! tokens. A small causal LM trained on those records plans in latent space
//! and reasons in text.

pub mod codec;
pub mod corpus;
mod error;
pub mod eval;
pub mod latentize;
pub mod lm;
pub mod pipeline;
pub mod tokenizer;

pub use error::{Error, Result};
