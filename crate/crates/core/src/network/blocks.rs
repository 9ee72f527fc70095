use crate::compute::{self_attention, AttnParams, Conv2d, GroupNorm, Graph, Linear, ParamBuilder, Tensor, Var};
use crate::error::Result;

/// Sinusoidal timestep features `[cos(t·f_k)…, sin(t·f_k)…]`, `f_k = 10000^(−k/half)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let freq = |k: usize| (-(10000f64.ln()) * k as f64 / half as f64).exp();
    let mut v: Vec<f64> = (0..half).map(|k| (t * freq(k)).cos()).collect();
    v.extend((0..half).map(|k| (t * freq(k)).sin()));
    v.resize(dim, 0.0);
    Tensor::new(&[dim], v).expect("length matches")
}

/// `Linear → SiLU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(pb: &mut ParamBuilder<'_>, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            first: Linear::new(&mut pb.sub("0"), d_in, d_hidden)?,
            second: Linear::new(&mut pb.sub("1"), d_hidden, d_out)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.silu(h)?;
        self.second.forward(g, h)
    }
}

/// Conditioning as seen by residual blocks.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    /// SiLU of the concatenated time and position embedding.
    pub emb: Var,
    pub global: Var,
}

/// Residual block with optional scale/shift modulation by the embedding and
/// multiplicative modulation by the global code.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    cond: Option<(Linear, Linear)>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    c_out: usize,
}

impl ResBlock {
    /// `cond_dims` is `(embedding dim, global dim)` for conditioned blocks.
    pub fn new(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, cond_dims: Option<(usize, usize)>) -> Result<Self> {
        let cond = match cond_dims {
            Some((emb, global)) => Some((
                Linear::new(&mut pb.sub("emb"), emb, 2 * c_out)?,
                Linear::zeroed(&mut pb.sub("global"), global, c_out)?,
            )),
            None => None,
        };
        Ok(Self {
            norm1: GroupNorm::new(&mut pb.sub("norm1"), c_in)?,
            conv1: Conv2d::new(&mut pb.sub("conv1"), c_in, c_out, 3)?,
            cond,
            norm2: GroupNorm::new(&mut pb.sub("norm2"), c_out)?,
            conv2: Conv2d::zeroed(&mut pb.sub("conv2"), c_out, c_out, 3)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&mut pb.sub("skip"), c_in, c_out, 1)?)
            } else {
                None
            },
            c_out,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, cond: Option<CondVars>) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h)?;
        let h = self.conv1.forward(g, h)?;
        let mut h = self.norm2.forward(g, h)?;
        if let (Some((emb_proj, global_proj)), Some(c)) = (&self.cond, cond) {
            let ss = emb_proj.forward(g, c.emb)?;
            let scale = g.narrow0(ss, 0, self.c_out)?;
            let shift = g.narrow0(ss, self.c_out, self.c_out)?;
            h = g.scale_shift(h, scale, shift)?;
            let gm = global_proj.forward(g, c.global)?;
            let gm = g.affine(gm, 1.0, 1.0)?;
            h = g.mul_channel(h, gm)?;
        }
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

/// A residual block optionally followed by self-attention.
#[derive(Clone, Debug)]
pub struct Stage {
    pub res: ResBlock,
    pub attn: Option<AttnParams>,
}

impl Stage {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        c_in: usize,
        c_out: usize,
        cond_dims: Option<(usize, usize)>,
        attention: bool,
    ) -> Result<Self> {
        let res = ResBlock::new(&mut pb.sub("res"), c_in, c_out, cond_dims)?;
        let attn = if attention {
            Some(AttnParams::new(&mut pb.sub("attn"), c_out)?)
        } else {
            None
        };
        Ok(Self { res, attn })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, cond: Option<CondVars>) -> Result<Var> {
        let h = self.res.forward(g, x, cond)?;
        match &self.attn {
            Some(a) => self_attention(g, h, a),
            None => Ok(h),
        }
    }
}

/// Mean over spatial positions: `[C, H, W] → [C]`.
pub fn global_avg_pool(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let (c, h, w) = g.value(x).dims3()?;
    let flat = g.reshape(x, &[c, h * w])?;
    let ones = g.input(Tensor::full(&[h * w, 1], 1.0 / (h * w) as f64));
    let pooled = g.matmul(flat, ones, false, false)?;
    g.reshape(pooled, &[c])
}
