//! Street-scene radiance fields from crowd-sourced vehicle imagery.
//!
//! The crate covers image selection, ground-plane depth priors, a grid +
//! MLP radiance field with per-sequence appearance embeddings, a volume
//! renderer, training with depth supervision, navigation-marker overlays,
//! evaluation metrics and a synthetic scene generator with exact ground
//! truth.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod field;
pub mod geometry;
pub mod ground;
pub mod manifest;
pub mod metrics;
pub mod nav;
pub mod pipeline;
pub mod render;
pub mod selection;
pub mod semantics;
pub mod service;
pub mod sfm;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
