//! Road extraction from aerial imagery.
//!
//! The crate covers the full desk-scale pipeline: paired image/mask loading
//! and patch extraction, geometric augmentation, a family of residual U-Nets
//! (optionally with a parallel dilated bottleneck) plus a sliding-window
//! CNN baseline, dice-loss training with reduce-on-plateau scheduling,
//! checkpointing, ensembled inference, and the 16x16 patch-labeling
//! protocol with submission-file output.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod render;
pub mod training;

pub use error::{Error, Result};
