//! Minimal differentiable tensor core: dense `f64` tensors, a reverse-mode
//! tape, the layers a patch U-Net needs, and Adam.

mod adam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{tile2x2, Grads, Graph, Var};
pub use layers::{attention_weights, norm_groups, resample, self_attention, AttnParams, Conv2d, Direction, GroupNorm, Linear};
pub use params::{Gradients, ParamBuilder, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
