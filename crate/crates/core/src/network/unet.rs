use serde::{Deserialize, Serialize};

use super::blocks::{timestep_embedding, CondVars, Mlp2, Stage};
use crate::compute::{resample, Conv2d, Direction, GroupNorm, Graph, ParamBuilder, ParamStore, Tensor, Var};
use crate::conditioning::{ConditionBundle, NullTokens, GLOBAL_DIM, POS_DIM};
use crate::error::{Error, Result};
use crate::geometry::FeatureStack;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub patch: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub res_blocks: usize,
    /// Spatial extents at which blocks add self-attention.
    pub attention_resolutions: Vec<usize>,
    pub cond_dim: usize,
    pub pos_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            patch: 64,
            in_channels: 3,
            base_channels: 64,
            channel_mult: vec![1, 2, 4, 8],
            res_blocks: 2,
            attention_resolutions: vec![16],
            cond_dim: GLOBAL_DIM,
            pos_dim: POS_DIM,
        }
    }
}

impl UNetConfig {
    /// Small network for 16-pixel patches.
    pub fn toy() -> Self {
        Self {
            patch: 16,
            base_channels: 8,
            channel_mult: vec![1, 2, 2],
            res_blocks: 1,
            attention_resolutions: vec![4],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mult.len();
        if levels == 0 || self.res_blocks == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::config("U-Net needs at least one level, block and channel"));
        }
        if !self.pos_dim.is_multiple_of(4) || self.pos_dim == 0 || self.cond_dim == 0 {
            return Err(Error::config("position dimension must be a positive multiple of 4"));
        }
        let coarsest = self.patch >> (levels - 1);
        if coarsest < 4 || !self.patch.is_multiple_of(1 << (levels - 1)) {
            return Err(Error::config(format!(
                "patch {} with {levels} levels leaves extent {coarsest} (< 4)",
                self.patch
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn extent(&self, level: usize) -> usize {
        self.patch >> level
    }

    /// `[C, s, s]` of every map in a feature stack, finest first.
    pub fn stack_shapes(&self) -> Vec<[usize; 3]> {
        (0..self.levels())
            .map(|l| [self.channels(l), self.extent(l), self.extent(l)])
            .collect()
    }

    fn emb_half(&self) -> usize {
        4 * self.base_channels
    }

    /// Width of the concatenated time and position embedding.
    pub fn emb_dim(&self) -> usize {
        2 * self.emb_half()
    }

    fn attends(&self, level: usize) -> bool {
        self.attention_resolutions.contains(&self.extent(level))
    }
}

/// Patch U-Net split into an encoder producing a [`FeatureStack`] and a
/// decoder consuming a (collaged) stack.
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    time_mlp: Mlp2,
    pos_mlp: Mlp2,
    pub null: NullTokens,
    conv_in: Conv2d,
    enc: Vec<Vec<Stage>>,
    mid: [Stage; 2],
    dec: Vec<(Option<Conv2d>, Vec<Stage>)>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn new(pb: &mut ParamBuilder<'_>, config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let cd = Some((config.emb_dim(), config.cond_dim));
        let half = config.emb_half();
        let base = config.base_channels;
        let levels = config.levels();

        let time_mlp = Mlp2::new(&mut pb.sub("time"), base, half, half)?;
        let pos_mlp = Mlp2::new(&mut pb.sub("pos"), config.pos_dim, half, half)?;
        let null = NullTokens::new(&mut pb.sub("null"), config.pos_dim, config.cond_dim)?;
        let conv_in = Conv2d::new(&mut pb.sub("conv_in"), config.in_channels, base, 3)?;

        let mut enc = Vec::with_capacity(levels);
        let mut ch = base;
        for l in 0..levels {
            let c = config.channels(l);
            let mut blocks = Vec::with_capacity(config.res_blocks);
            for b in 0..config.res_blocks {
                blocks.push(Stage::new(&mut pb.sub(&format!("enc.{l}.{b}")), ch, c, cd, config.attends(l))?);
                ch = c;
            }
            enc.push(blocks);
        }
        let mid = [
            Stage::new(&mut pb.sub("mid.0"), ch, ch, cd, true)?,
            Stage::new(&mut pb.sub("mid.1"), ch, ch, cd, false)?,
        ];

        let mut dec = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let c = config.channels(l);
            let (up, mut c_in) = if l + 1 == levels {
                (None, c)
            } else {
                let cu = config.channels(l + 1);
                (Some(Conv2d::new(&mut pb.sub(&format!("dec.{l}.up")), cu, cu, 3)?), cu + c)
            };
            let mut blocks = Vec::with_capacity(config.res_blocks);
            for b in 0..config.res_blocks {
                blocks.push(Stage::new(&mut pb.sub(&format!("dec.{l}.{b}")), c_in, c, cd, config.attends(l))?);
                c_in = c;
            }
            dec.push((up, blocks));
        }
        let out_norm = GroupNorm::new(&mut pb.sub("out_norm"), base)?;
        let out_conv = Conv2d::zeroed(&mut pb.sub("out_conv"), base, config.in_channels, 3)?;

        Ok(Self {
            config,
            time_mlp,
            pos_mlp,
            null,
            conv_in,
            enc,
            mid,
            dec,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Projected time embedding, shared by encoder and decoder passes.
    pub fn time_embedding(&self, g: &mut Graph<'_>, t: usize) -> Result<Var> {
        let x = g.input(timestep_embedding(t as f64, self.config.base_channels));
        self.time_mlp.forward(g, x)
    }

    /// Combines a time embedding with a position (null token when `None`) and
    /// a global code (null token when `None`).
    pub fn cond_vars(&self, g: &mut Graph<'_>, temb: Var, pos: Option<&Tensor>, global: Option<Var>) -> Result<CondVars> {
        let pos = match pos {
            Some(p) => {
                if p.shape() != [self.config.pos_dim] {
                    return Err(Error::dim(format!("position embedding {:?}, expected [{}]", p.shape(), self.config.pos_dim)));
                }
                g.input(p.clone())
            }
            None => g.param(self.null.pos),
        };
        let pemb = self.pos_mlp.forward(g, pos)?;
        let emb = g.concat0(&[temb, pemb])?;
        let emb = g.silu(emb)?;
        let global = match global {
            Some(v) => {
                if g.value(v).shape() != [self.config.cond_dim] {
                    return Err(Error::dim(format!(
                        "global code {:?}, expected [{}]",
                        g.value(v).shape(),
                        self.config.cond_dim
                    )));
                }
                v
            }
            None => g.param(self.null.global),
        };
        Ok(CondVars { emb, global })
    }

    /// Conditioning variables for a tensor-level bundle.
    pub fn bundle_vars(&self, g: &mut Graph<'_>, bundle: &ConditionBundle) -> Result<CondVars> {
        let temb = self.time_embedding(g, bundle.t)?;
        let global = (!bundle.global_is_null).then(|| g.input(bundle.global.clone()));
        let pos = (!bundle.pos_is_null).then_some(&bundle.pos);
        self.cond_vars(g, temb, pos, global)
    }

    pub fn encode(&self, g: &mut Graph<'_>, x: Var, cond: CondVars) -> Result<Vec<Var>> {
        let p = self.config.patch;
        if g.value(x).shape() != [self.config.in_channels, p, p] {
            return Err(Error::dim(format!(
                "patch {:?}, expected [{}, {p}, {p}]",
                g.value(x).shape(),
                self.config.in_channels
            )));
        }
        let mut h = self.conv_in.forward(g, x)?;
        let mut stack = Vec::with_capacity(self.config.levels());
        for (l, blocks) in self.enc.iter().enumerate() {
            if l > 0 {
                h = resample(g, h, Direction::Down)?;
            }
            for s in blocks {
                h = s.forward(g, h, Some(cond))?;
            }
            if l + 1 == self.enc.len() {
                for s in &self.mid {
                    h = s.forward(g, h, Some(cond))?;
                }
            }
            stack.push(h);
        }
        Ok(stack)
    }

    pub fn decode(&self, g: &mut Graph<'_>, zc: &[Var], cond: CondVars) -> Result<Var> {
        let shapes = self.config.stack_shapes();
        if zc.len() != shapes.len() {
            return Err(Error::dim(format!("stack of {} maps, expected {}", zc.len(), shapes.len())));
        }
        for (k, (&z, s)) in zc.iter().zip(&shapes).enumerate() {
            if g.value(z).shape() != s {
                return Err(Error::dim(format!("stack map {k} is {:?}, expected {s:?}", g.value(z).shape())));
            }
        }
        let levels = shapes.len();
        let mut h = zc[levels - 1];
        for (k, (up, blocks)) in self.dec.iter().enumerate() {
            let l = levels - 1 - k;
            if let Some(up) = up {
                h = resample(g, h, Direction::Up)?;
                h = up.forward(g, h)?;
                h = g.concat0(&[h, zc[l]])?;
            }
            for s in blocks {
                h = s.forward(g, h, Some(cond))?;
            }
        }
        let h = self.out_norm.forward(g, h)?;
        let h = g.silu(h)?;
        self.out_conv.forward(g, h)
    }

    /// Encoder features of one patch.
    pub fn encode_patch(&self, store: &ParamStore, patch: &Tensor, cond: &ConditionBundle) -> Result<FeatureStack> {
        let mut g = Graph::new(store);
        let c = self.bundle_vars(&mut g, cond)?;
        let x = g.input(patch.clone());
        let stack = self.encode(&mut g, x, c)?;
        Ok(FeatureStack(stack.into_iter().map(|v| g.value(v).clone()).collect()))
    }

    /// Predicted noise of a shifted patch from its collaged stack.
    pub fn decode_collaged(&self, store: &ParamStore, zc: &FeatureStack, cond: &ConditionBundle) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let c = self.bundle_vars(&mut g, cond)?;
        let vars: Vec<Var> = zc.levels().iter().map(|z| g.input(z.clone())).collect();
        let out = self.decode(&mut g, &vars, c)?;
        Ok(g.value(out).clone())
    }
}
