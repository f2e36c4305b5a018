//! Tri-stage dual-human motion diffusion.
//!
//! The denoiser refines two persons' motion features in three passes: a
//! per-person stage conditioned on each person's own prompt, an
//! interaction-aware graph stage whose cross-person edges are weighted by
//! a predicted distance profile, and a refinement stage that attends over
//! the overall prompt and the partner's motion.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod model;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
