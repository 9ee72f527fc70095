use serde::{Deserialize, Serialize};

use super::blocks::{global_avg_pool, Stage};
use crate::compute::{resample, Conv2d, Direction, GroupNorm, Graph, Linear, ParamBuilder, ParamStore, Tensor, Var};
use crate::conditioning::GLOBAL_DIM;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticEncoderConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub res_blocks: usize,
    pub attention_resolutions: Vec<usize>,
    pub out_dim: usize,
}

impl Default for SemanticEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            in_channels: 3,
            base_channels: 64,
            channel_mult: vec![1, 2, 4, 8, 8],
            res_blocks: 2,
            attention_resolutions: vec![16],
            out_dim: GLOBAL_DIM,
        }
    }
}

impl SemanticEncoderConfig {
    /// Small encoder for 64×64 images.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            base_channels: 8,
            channel_mult: vec![1, 2, 2, 2],
            res_blocks: 1,
            attention_resolutions: vec![],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mult.len();
        if levels == 0 || self.res_blocks == 0 || self.base_channels == 0 || self.out_dim == 0 {
            return Err(Error::config("semantic encoder needs levels, blocks and channels"));
        }
        if !self.image_size.is_multiple_of(1 << (levels - 1)) || self.image_size >> (levels - 1) < 2 {
            return Err(Error::config(format!(
                "image size {} cannot be halved {} times",
                self.image_size,
                levels - 1
            )));
        }
        Ok(())
    }
}

/// Image → global code: residual levels, then average pooling and an affine head.
#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    config: SemanticEncoderConfig,
    conv_in: Conv2d,
    levels: Vec<Vec<Stage>>,
    norm: GroupNorm,
    head: Linear,
}

impl SemanticEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, config: SemanticEncoderConfig) -> Result<Self> {
        config.validate()?;
        let conv_in = Conv2d::new(&mut pb.sub("conv_in"), config.in_channels, config.base_channels, 3)?;
        let mut ch = config.base_channels;
        let mut levels = Vec::new();
        for (l, m) in config.channel_mult.iter().enumerate() {
            let c = config.base_channels * m;
            let extent = config.image_size >> l;
            let attn = config.attention_resolutions.contains(&extent);
            let mut blocks = Vec::new();
            for b in 0..config.res_blocks {
                blocks.push(Stage::new(&mut pb.sub(&format!("level.{l}.{b}")), ch, c, None, attn)?);
                ch = c;
            }
            levels.push(blocks);
        }
        let norm = GroupNorm::new(&mut pb.sub("norm"), ch)?;
        let head = Linear::new(&mut pb.sub("head"), ch, config.out_dim)?;
        Ok(Self {
            config,
            conv_in,
            levels,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &SemanticEncoderConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: Var) -> Result<Var> {
        let s = self.config.image_size;
        if g.value(image).shape() != [self.config.in_channels, s, s] {
            return Err(Error::dim(format!(
                "semantic encoder input {:?}, expected [{}, {s}, {s}]",
                g.value(image).shape(),
                self.config.in_channels
            )));
        }
        let mut h = self.conv_in.forward(g, image)?;
        for (l, blocks) in self.levels.iter().enumerate() {
            if l > 0 {
                h = resample(g, h, Direction::Down)?;
            }
            for b in blocks {
                h = b.forward(g, h, None)?;
            }
        }
        let h = self.norm.forward(g, h)?;
        let h = g.silu(h)?;
        let pooled = global_avg_pool(g, h)?;
        self.head.forward(g, pooled)
    }

    pub fn semantic_encode(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let x = g.input(image.clone());
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }
}
