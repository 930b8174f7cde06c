//! Disentangled multi-expert stance detection over precomputed text and
//! image embeddings.
//!
//! The model projects each modality into a common space, fuses three token
//! pairs with small Transformer blocks (textual, visual and cross-modal
//! experts), supervises them with two triplet losses and a cosine-consistency
//! loss, and mixes the expert outputs with an instance-conditioned gate
//! before a softmax classifier.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experts;
pub mod frontend;
pub mod fusion;
pub mod gating;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{DimeError, Result};
