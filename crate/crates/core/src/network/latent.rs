use serde::{Deserialize, Serialize};

use super::blocks::{timestep_embedding, Mlp2};
use crate::compute::{Graph, Linear, ParamBuilder, ParamStore, Tensor, Var};
use crate::conditioning::GLOBAL_DIM;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDenoiserConfig {
    pub dim: usize,
    /// Linear layers including the output layer.
    pub layers: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

impl Default for LatentDenoiserConfig {
    fn default() -> Self {
        Self {
            dim: GLOBAL_DIM,
            layers: 10,
            hidden: 2048,
            time_dim: 64,
        }
    }
}

impl LatentDenoiserConfig {
    pub fn toy() -> Self {
        Self {
            layers: 4,
            hidden: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.hidden == 0 || self.dim == 0 || self.time_dim < 2 {
            return Err(Error::config("latent denoiser needs ≥ 2 layers and positive widths"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Hidden {
    from_h: Option<Linear>,
    from_x: Linear,
    time: Linear,
}

/// MLP over codes in which every layer, the output included, also reads the
/// input and is scaled by a projection of the time embedding.
#[derive(Clone, Debug)]
pub struct LatentDenoiser {
    config: LatentDenoiserConfig,
    time_mlp: Mlp2,
    hidden: Vec<Hidden>,
    out: Linear,
    out_x: Linear,
    out_t: Linear,
}

impl LatentDenoiser {
    pub fn new(pb: &mut ParamBuilder<'_>, config: LatentDenoiserConfig) -> Result<Self> {
        config.validate()?;
        let (d, w) = (config.dim, config.hidden);
        let time_mlp = Mlp2::new(&mut pb.sub("time"), config.time_dim, w, w)?;
        let hidden = (0..config.layers - 1)
            .map(|i| {
                let mut sub = pb.sub(&format!("layer.{i}"));
                Ok(Hidden {
                    from_h: if i == 0 { None } else { Some(Linear::new(&mut sub.sub("h"), w, w)?) },
                    from_x: Linear::new(&mut sub.sub("x"), d, w)?,
                    time: Linear::zeroed(&mut sub.sub("t"), w, w)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::zeroed(&mut pb.sub("out"), w, d)?;
        let out_x = Linear::zeroed(&mut pb.sub("out_x"), d, d)?;
        let out_t = Linear::zeroed(&mut pb.sub("out_t"), w, d)?;
        Ok(Self {
            config,
            time_mlp,
            hidden,
            out,
            out_x,
            out_t,
        })
    }

    pub fn config(&self) -> &LatentDenoiserConfig {
        &self.config
    }

    /// `z` is `[B, dim]`; `t` holds one timestep per row.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var, t: &[usize]) -> Result<Var> {
        let (b, d) = g.value(z).dims2()?;
        if g.value(z).rank() != 2 || d != self.config.dim || b != t.len() {
            return Err(Error::dim(format!(
                "latent input {:?} with {} timesteps, expected [B, {}]",
                g.value(z).shape(),
                t.len(),
                self.config.dim
            )));
        }
        let td = self.config.time_dim;
        let mut feats = Vec::with_capacity(b * td);
        for &ti in t {
            feats.extend_from_slice(timestep_embedding(ti as f64, td).data());
        }
        let tin = g.input(Tensor::new(&[b, td], feats)?);
        let temb = self.time_mlp.forward(g, tin)?;
        let temb = g.silu(temb)?;
        let mut h: Option<Var> = None;
        for layer in &self.hidden {
            let mut pre = layer.from_x.forward(g, z)?;
            if let (Some(lin), Some(prev)) = (&layer.from_h, h) {
                let hh = lin.forward(g, prev)?;
                pre = g.add(pre, hh)?;
            }
            let s = layer.time.forward(g, temb)?;
            let s = g.affine(s, 1.0, 1.0)?;
            let pre = g.mul(pre, s)?;
            h = Some(g.silu(pre)?);
        }
        let out = self.out.forward(g, h.expect("at least one hidden layer"))?;
        let skip = self.out_x.forward(g, z)?;
        let gain = self.out_t.forward(g, temb)?;
        let gain = g.affine(gain, 1.0, 1.0)?;
        let skip = g.mul(skip, gain)?;
        g.add(out, skip)
    }

    /// Predicted noise for a single code `[dim]` or a batch `[B, dim]`.
    pub fn latent_denoise(&self, store: &ParamStore, z_t: &Tensor, t: usize) -> Result<Tensor> {
        let single = z_t.rank() == 1;
        let batch = if single {
            z_t.clone().reshape(&[1, z_t.len()])?
        } else {
            z_t.clone()
        };
        let rows = batch.shape()[0];
        let mut g = Graph::new(store);
        let z = g.input(batch);
        let out = self.forward(&mut g, z, &vec![t; rows])?;
        let out = g.value(out).clone();
        if single {
            out.reshape(&[self.config.dim])
        } else {
            Ok(out)
        }
    }
}
