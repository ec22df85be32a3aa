//! Invertible flow from model-space inputs to latents.
//!
//! Each step is actnorm → invertible linear mixing → affine coupling. All
//! three have closed-form inverses and log-determinants, so the model's
//! total log-determinant is the sum over blocks.

mod actnorm;
mod coupling;
mod mix;
mod model;

pub use actnorm::ActNorm;
pub use coupling::{Coupling, SCALE_CLAMP};
pub use mix::Mix;
pub use model::{
    log_likelihood, log_likelihood_graph, FlowBlock, FlowConfig, FlowModel, MaskLayout,
};
