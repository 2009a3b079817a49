//! Anchor-based multimodal fusion with label-description synchronization
//! for intent recognition.
//!
//! The pipeline: per-modality [`encoders`] feed the anchor module
//! ([`a_me`]), whose fused sequence goes through the transformer stack and
//! classifier in [`model_core`]. [`semantic_sync`] supplies the description
//! bank and the contrastive loss; [`train_eval`] and [`cli_data`] drive
//! training, evaluation and datasets.

pub mod a_me;
pub mod autodiff;
pub mod cli_data;
pub mod config;
pub mod encoders;
pub mod error;
pub mod layers;
pub mod model_core;
pub mod semantic_sync;
pub mod train_eval;

pub use autodiff::{Graph, Matrix, ParamStore};
pub use config::TrainConfig;
pub use error::{Error, Result};
