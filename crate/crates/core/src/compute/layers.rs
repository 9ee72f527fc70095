//! Parameterized building blocks over [`Graph`] operations.

use super::graph::{Graph, Var};
use super::params::{ParamBuilder, ParamId};
use crate::error::{Error, Result};

/// Groups used by every normalization layer for `channels` channels.
pub fn norm_groups(channels: usize) -> usize {
    let mut g = channels.min(32);
    while !channels.is_multiple_of(g) {
        g -= 1;
    }
    g
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Same-size convolution with fan-in uniform init.
    pub fn new(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[c_out, c_in, k, k], bound)?,
            bias: pb.zeros("bias", &[c_out])?,
            stride: 1,
            pad: k / 2,
        })
    }

    /// Convolution whose weights and bias start at zero.
    pub fn zeroed(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.zeros("weight", &[c_out, c_in, k, k])?,
            bias: pb.zeros("bias", &[c_out])?,
            stride: 1,
            pad: k / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.ones("gamma", &[channels])?,
            beta: pb.zeros("beta", &[channels])?,
            groups: norm_groups(channels),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, self.groups, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[d_out, d_in], bound)?,
            bias: pb.zeros("bias", &[d_out])?,
        })
    }

    pub fn zeroed(pb: &mut ParamBuilder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.zeros("weight", &[d_out, d_in])?,
            bias: pb.zeros("bias", &[d_out])?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Single-head spatial self-attention weights.
#[derive(Clone, Debug)]
pub struct AttnParams {
    /// `[3C, C]` query/key/value projection.
    pub qkv_weight: ParamId,
    pub qkv_bias: ParamId,
    /// `[C, C]` output projection.
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

impl AttnParams {
    /// Output projection starts at zero so the block is initially the identity.
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        let bound = 1.0 / (channels as f64).sqrt();
        Ok(Self {
            qkv_weight: pb.uniform("qkv_weight", &[3 * channels, channels], bound)?,
            qkv_bias: pb.zeros("qkv_bias", &[3 * channels])?,
            out_weight: pb.zeros("out_weight", &[channels, channels])?,
            out_bias: pb.zeros("out_bias", &[channels])?,
        })
    }
}

/// `x + W_o · (V · softmax(QᵀK / √C)ᵀ) + b_o` over the H·W token axis.
pub fn self_attention(g: &mut Graph<'_>, x: Var, p: &AttnParams) -> Result<Var> {
    let (c, h, w) = g.value(x).dims3()?;
    if h != w {
        return Err(Error::dim(format!("attention needs a square map, got {h}×{w}")));
    }
    let n = h * w;
    let tokens = g.reshape(x, &[c, n])?;
    let wqkv = g.param(p.qkv_weight);
    let bqkv = g.param(p.qkv_bias);
    let qkv = g.matmul(wqkv, tokens, false, false)?;
    let qkv = g.add_channel(qkv, bqkv)?;
    let q = g.narrow0(qkv, 0, c)?;
    let k = g.narrow0(qkv, c, c)?;
    let v = g.narrow0(qkv, 2 * c, c)?;
    let logits = g.matmul(q, k, true, false)?;
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt())?;
    let weights = g.softmax_rows(logits)?;
    let mixed = g.matmul(v, weights, false, true)?;
    let wo = g.param(p.out_weight);
    let bo = g.param(p.out_bias);
    let proj = g.matmul(wo, mixed, false, false)?;
    let proj = g.add_channel(proj, bo)?;
    let proj = g.reshape(proj, &[c, h, w])?;
    g.add(x, proj)
}

/// Attention weight matrix `softmax(QᵀK / √C)` (rows are queries).
pub fn attention_weights(g: &mut Graph<'_>, x: Var, p: &AttnParams) -> Result<Var> {
    let (c, h, w) = g.value(x).dims3()?;
    let tokens = g.reshape(x, &[c, h * w])?;
    let wqkv = g.param(p.qkv_weight);
    let bqkv = g.param(p.qkv_bias);
    let qkv = g.matmul(wqkv, tokens, false, false)?;
    let qkv = g.add_channel(qkv, bqkv)?;
    let q = g.narrow0(qkv, 0, c)?;
    let k = g.narrow0(qkv, c, c)?;
    let logits = g.matmul(q, k, true, false)?;
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt())?;
    g.softmax_rows(logits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// 2×2 mean-pool down or nearest-neighbour up.
pub fn resample(g: &mut Graph<'_>, x: Var, dir: Direction) -> Result<Var> {
    match dir {
        Direction::Down => g.avg_pool2(x),
        Direction::Up => g.upsample2(x),
    }
}
