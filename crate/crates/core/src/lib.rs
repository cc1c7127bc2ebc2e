//! Global/local adversarial domain adaptation on multi-region samples.
//!
//! The pipeline: per-region feature extractors feed seven classifiers and
//! seven domain discriminators ([`model`]); training alternates a
//! discriminator step with a feature/classifier step that also consumes
//! per-view pseudo labels on target data ([`objectives`], [`fplg`]); inference
//! fuses the seven heads with a confidence-gated cascade ([`glpc`]).

pub mod autodiff;
pub mod error;
pub mod fplg;
pub mod glpc;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod stats;
pub mod synthdata;

pub use error::{Error, Result};
