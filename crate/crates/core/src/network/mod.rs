//! The learned networks: the patch U-Net, the semantic image encoder and the
//! latent code denoiser.

mod blocks;
mod latent;
mod model;
mod semantic;
mod unet;

pub use blocks::{global_avg_pool, timestep_embedding, CondVars, Mlp2, ResBlock, Stage};
pub use latent::{LatentDenoiser, LatentDenoiserConfig};
pub use model::{EmbeddingMode, ModelConfig, PatchDm, ENCODER_PREFIX, TABLE_PREFIX, UNET_PREFIX};
pub use semantic::{SemanticEncoder, SemanticEncoderConfig};
pub use unet::{UNet, UNetConfig};

pub use crate::geometry::FeatureStack;

use crate::compute::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{PatchMap, COLLAGE_SOURCES};

/// Differentiable counterpart of [`crate::geometry::collage_features`] over
/// graph variables.
pub fn collage_vars(g: &mut Graph<'_>, z: &PatchMap<Vec<Var>>, i: usize, j: usize) -> Result<Vec<Var>> {
    if i + 1 >= z.rows() || j + 1 >= z.cols() {
        return Err(Error::contract(format!(
            "shifted patch ({i},{j}) needs neighbours inside the {}×{} padded grid",
            z.rows(),
            z.cols()
        )));
    }
    let n = [
        z.require(i, j)?,
        z.require(i, j + 1)?,
        z.require(i + 1, j)?,
        z.require(i + 1, j + 1)?,
    ];
    let levels = n[0].len();
    if n.iter().any(|s| s.len() != levels) {
        return Err(Error::dim("neighbouring feature stacks differ in depth"));
    }
    (0..levels)
        .map(|k| {
            let mut parts = [n[0][k]; 4];
            for (q, src) in COLLAGE_SOURCES.iter().enumerate() {
                let v = n[q][k];
                let (_, h, w) = g.value(v).dims3()?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::dim(format!("quadrant split of odd extent {h}×{w}")));
                }
                let (y0, x0, qh, qw) = src.rect(h, w);
                parts[q] = g.crop(v, y0, x0, qh, qw)?;
            }
            g.tile2x2(parts)
        })
        .collect()
}

#[cfg(test)]
mod tests;
