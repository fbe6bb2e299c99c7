//! Feed-forward identity protection against diffusion-model personalization.
//!
//! A defender network maps an image to a bounded perturbation in one forward
//! pass. It is trained by distilling the ascent direction of the diffusion
//! loss from frozen toy denoisers, optionally regularised toward
//! optimisation-based (PGD) perturbations, and evaluated against an adversary
//! who fine-tunes on the protected images.

pub mod diffusion;
pub mod error;
pub mod harness;
pub mod imagewise;
pub mod metrics;
pub mod numerics;
pub mod personalize;
pub mod postprocess;
pub mod rid;

pub use error::{Error, Result};
