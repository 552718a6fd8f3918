//! IDCLRec: sequential recommendation with intent-interest disentanglement
//! and item-aware intent contrastive learning.
//!
//! The crate covers the full pipeline: interaction ingestion and 5-core
//! filtering, sequence construction and augmentation, a causal self-attention
//! encoder, the interest/intent disentangler, user-level categorical intent,
//! the contrastive training objectives, Adam training with early stopping,
//! full-ranking evaluation, ablation variants, and the representation
//! analyses. Everything is deterministic given a 64-bit seed.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod disentangler;
pub mod encoder;
pub mod error;
pub mod intent;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
