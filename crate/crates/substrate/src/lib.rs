//! Numeric substrate for the latent-planning pipeline.
//!
//! Dense row-major tensors, a tape that records the handful of operations the
//! plan codec and the causal language model need, reverse-mode gradients over
//! that tape, pre-norm transformer blocks, AdamW with a cosine schedule, a
//! seeded ChaCha8 generator and a self-describing checkpoint format.
//!
//! Everything is generic over [`Float`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

pub mod checkpoint;
mod error;
mod float;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
mod tensor;

pub use error::{Error, Result};
pub use float::Float;
pub use graph::{AttentionLayout, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
