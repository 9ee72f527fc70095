//! Patch-based denoising diffusion with feature collage.
//!
//! Images are split into small patches that a U-Net encodes independently;
//! before decoding, each patch's multi-level features are cut into quadrants
//! and recombined with its neighbours' so the decoder predicts noise for a
//! half-patch-shifted window. Full-resolution images are synthesized without
//! seams while the network only ever sees `p×p` inputs.

pub mod compute;
pub mod conditioning;
mod error;
pub mod geometry;
pub mod network;
pub mod pipeline;
pub mod sampling;
pub mod schedule;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
