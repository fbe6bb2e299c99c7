//! Tensor substrate: dense arrays, deterministic randomness, a reverse-mode
//! tape, Adam, and a finite-difference gradient checker.

mod adam;
mod elem;
mod gemm;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use elem::Elem;
pub use gemm::gemm;
pub use gradcheck::{grad_check, GradCheck};
pub use graph::{ConvGeom, Grads, Graph, Var};
pub use params::{relative_error, Bound, GradBundle, ParamSet};
pub use rng::{streams, Rng};
pub use tensor::{Array, Tensor};

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scaled normal initialisation (`std = gain / sqrt(fan_in)`).
pub fn init_normal(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f32) -> Tensor {
    rng.gaussian(shape).scale(gain / (fan_in as f32).sqrt())
}
