//! Concept-based multiple-instance learning over bags of patch embeddings.
//!
//! An attention MIL image branch picks the most salient patches, and a
//! concept branch classifies from their cosine similarities to a set of
//! named text concepts. Because the concept classifier is linear in gated
//! concept sums, every prediction splits exactly into per-concept
//! contributions plus a bias.

pub mod autodiff;
pub mod bagio;
pub mod cli;
pub mod concept_branch;
pub mod error;
pub mod explain;
pub mod image_branch;
pub mod metrics;
pub mod model;
pub mod projection;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod topk;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
