//! Core library for cross-style sketch / 3D shape view matching.
//!
//! Pipeline stages: dataset identities and procedural generation
//! ([`dataset`]), image-space normalization ([`preprocess`]), layer-tapped
//! encoders ([`encoder`]), exact max-over-views retrieval ([`retrieval`]),
//! contrastive fine-tuning ([`finetune`]), experiment drivers
//! ([`experiments`]), and cross-domain distance matrices ([`analysis`]).

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod preprocess;
pub mod analysis;
pub mod experiments;
pub mod finetune;
pub mod retrieval;

pub use error::{Error, Result};
