//! Motion-driven synthetic human dataset generation.
//!
//! The pipeline builds a canonical Gaussian-splat avatar on an articulated body
//! model, refines it with score distillation against a pluggable denoiser,
//! deforms it with motion sequences, rasterizes it under sampled cameras,
//! composites the result into lit scenes and exports annotated pose datasets.
//!
//! Stage modules:
//!
//! - [`body_model`]: skinning, joint regression, motion ingestion
//! - [`avatar`]: surface-bound Gaussian clouds, densify/prune
//! - [`guidance`]: dual-branch score distillation and denoiser plug-ins
//! - [`animate`]: per-frame deformation and deviation culling
//! - [`render`]: cameras, differentiable splat rasterizer, masks
//! - [`compose`]: shading, shadows, compositing, relight consistency loss
//! - [`prompts`]: balanced cyclic prompt generation
//! - [`dataset`]: annotation records, splits, validation, AP metric
//! - [`pipeline`]: configuration and end-to-end orchestration used by the CLI

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod animate;
pub mod avatar;
pub mod body_model;
pub mod cli;
pub mod compose;
pub mod dataset;
pub mod error;
pub mod guidance;
pub mod image;
pub mod math;
pub mod pipeline;
pub mod prompts;
pub mod render;
pub mod rng;

pub use error::{Error, Result};

/// Version tag written into every file format produced by this crate.
pub const FORMAT_VERSION: u32 = 1;
