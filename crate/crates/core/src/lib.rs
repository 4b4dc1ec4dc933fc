//! Weakly-supervised whole-slide image classification with a Vision
//! Transformer trained from scratch.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! - [`tiling`]: load slides, segment tissue and cut labeled patches
//! - [`dataset`]: patch manifests and fold plans
//! - [`vit`]: the Vision Transformer classifier
//! - [`training`]: mini-batch training and checkpoints
//! - [`metrics`]: confusion counts, ROC/AUC and fold aggregation
//! - [`inference`]: majority-vote diagnosis for an unseen slide
//!
//! [`numerics`] provides the tensors, reverse-mode differentiation and
//! optimizer everything above is built on.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod metrics;
pub mod numerics;
pub mod seed;
pub mod synthetic;
pub mod tiling;
pub mod training;
pub mod vit;

pub use error::{Error, Result};
pub use numerics::{Tensor, Var};

/// Class code of anaplastic large cell lymphoma.
pub const ALCL: u8 = 0;
/// Class code of classic Hodgkin lymphoma.
pub const CHL: u8 = 1;

/// Human-readable name of a class code.
pub fn class_name(code: u8) -> &'static str {
    match code {
        ALCL => "ALCL",
        CHL => "cHL",
        _ => "unknown",
    }
}
