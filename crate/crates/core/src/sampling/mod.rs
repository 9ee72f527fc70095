//! Full-image synthesis by repeated patch encode → collage → decode, the
//! editing applications built on it, and ablation samplers.

mod baseline;
mod edit;
mod latent;

pub use baseline::{baseline_sample, pixel_offset, BaselineMode};
pub use edit::{extend_canvas, extend_resolution_2x, inpaint, outpaint, EditSpec};
pub use latent::{sample_codes, sample_unconditional, LatentPrior};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compute::{Graph, Tensor};
use crate::conditioning::{cfg_combine, PositionPlan};
use crate::error::{Error, Result};
use crate::geometry::{collage_features, pad_half_patch, unpatchify, FeatureStack, PadFill, PatchGrid, PatchMap};
use crate::network::PatchDm;
use crate::schedule::{ddim_step, ddpm_step, predict_x0, timestep_subsequence, NoiseSchedule};

/// Encoder/decoder halves of a patch network.
pub trait PatchModel: Sync {
    fn patch(&self) -> usize;
    fn channels(&self) -> usize;
    fn pos_dim(&self) -> usize;
    fn encode(&self, patch: &Tensor, t: usize, pos: Option<&Tensor>, global: Option<&Tensor>) -> Result<FeatureStack>;
    fn decode(&self, zc: &FeatureStack, t: usize, pos: Option<&Tensor>, global: Option<&Tensor>) -> Result<Tensor>;
}

impl PatchModel for PatchDm {
    fn patch(&self) -> usize {
        self.config.unet.patch
    }

    fn channels(&self) -> usize {
        self.config.unet.in_channels
    }

    fn pos_dim(&self) -> usize {
        self.config.unet.pos_dim
    }

    fn encode(&self, patch: &Tensor, t: usize, pos: Option<&Tensor>, global: Option<&Tensor>) -> Result<FeatureStack> {
        let mut g = Graph::new(&self.store);
        let temb = self.unet.time_embedding(&mut g, t)?;
        let gv = global.map(|c| g.input(c.clone()));
        let c = self.unet.cond_vars(&mut g, temb, pos, gv)?;
        let x = g.input(patch.clone());
        let stack = self.unet.encode(&mut g, x, c)?;
        Ok(FeatureStack(stack.into_iter().map(|v| g.value(v).clone()).collect()))
    }

    fn decode(&self, zc: &FeatureStack, t: usize, pos: Option<&Tensor>, global: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let temb = self.unet.time_embedding(&mut g, t)?;
        let gv = global.map(|c| g.input(c.clone()));
        let c = self.unet.cond_vars(&mut g, temb, pos, gv)?;
        let vars: Vec<_> = zc.levels().iter().map(|z| g.input(z.clone())).collect();
        let out = self.unet.decode(&mut g, &vars, c)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Ddim { eta: f64 },
    /// Ancestral sampling; on a strided subsequence this is DDIM with `eta = 1`.
    Ddpm,
}

/// Inference-time border fill of the padded canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferencePad {
    Zeros,
    /// Gaussian noise at the current marginal scale `√(1 − ᾱ_t)`.
    MatchedNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub grid: PatchGrid,
    pub steps: usize,
    pub sampler: Sampler,
    pub guidance: f64,
    pub positions: PositionPlan,
    pub pad: InferencePad,
    /// Clamp the `x̂0` estimate to `[-1, 1]` inside every update.
    pub clip_x0: bool,
    pub parallel: bool,
    pub seed: u64,
}

impl SampleSpec {
    pub fn new(grid: PatchGrid, steps: usize, seed: u64) -> Self {
        Self {
            grid,
            steps,
            sampler: Sampler::Ddim { eta: 0.0 },
            guidance: 0.0,
            positions: PositionPlan::grid(grid.rows, grid.cols),
            pad: InferencePad::Zeros,
            clip_x0: true,
            parallel: true,
            seed,
        }
    }

    pub fn shape(&self, channels: usize) -> [usize; 3] {
        [channels, self.grid.height(), self.grid.width()]
    }
}

fn map_patches<T: Send>(
    indices: Vec<(usize, usize)>,
    parallel: bool,
    f: impl Fn(usize, usize) -> Result<T> + Sync,
) -> Result<Vec<((usize, usize), T)>> {
    let run = |&(i, j): &(usize, usize)| f(i, j).map(|v| ((i, j), v));
    if parallel {
        indices.par_iter().map(run).collect()
    } else {
        indices.iter().map(run).collect()
    }
}

/// One collage pass: noise prediction for the whole of `x_t`.
fn collage_pass<M: PatchModel>(
    model: &M,
    x_t: &Tensor,
    t: usize,
    plan: &PositionPlan,
    global: Option<&Tensor>,
    canvas: &Tensor,
    grid: &PatchGrid,
    parallel: bool,
) -> Result<Tensor> {
    let p = grid.patch;
    let dim = model.pos_dim();
    let padded = grid.padded();
    let encoded = map_patches(padded.indices().collect(), parallel, |a, b| {
        let pos = plan.embed_padded(a, b, dim)?;
        model.encode(&canvas.crop(a * p, b * p, p, p)?, t, pos.as_ref(), global)
    })?;
    let mut z = PatchMap::new(padded.rows, padded.cols);
    for ((a, b), s) in encoded {
        z.insert(a, b, s)?;
    }
    let decoded = map_patches(grid.indices().collect(), parallel, |i, j| {
        let zc = collage_features(&z, i, j)?;
        let pos = plan.embed_shifted(i, j, dim)?;
        model.decode(&zc, t, pos.as_ref(), global)
    })?;
    let mut out = PatchMap::new(grid.rows, grid.cols);
    for ((i, j), e) in decoded {
        out.insert(i, j, e)?;
    }
    let eps = unpatchify(&out, grid)?;
    x_t.same_shape(&eps)?;
    Ok(eps)
}

fn pad_canvas(x_t: &Tensor, p: usize, t: usize, pad: InferencePad, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let fill = match pad {
        InferencePad::Zeros => PadFill::Zeros,
        InferencePad::MatchedNoise => PadFill::Noise {
            sigma: (1.0 - sched.alpha_bar(t)).sqrt(),
        },
    };
    pad_half_patch(x_t, p, fill, rng)
}

/// Predicted noise for the full image `x_t`, with classifier-free guidance
/// when `spec.guidance ≠ 0` (the unconditional pass nulls position and global).
pub fn denoise_once<M: PatchModel>(
    model: &M,
    x_t: &Tensor,
    t: usize,
    spec: &SampleSpec,
    global: Option<&Tensor>,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let grid = spec.grid;
    if grid.patch != model.patch() {
        return Err(Error::contract(format!(
            "grid patch {} but model patch {}",
            grid.patch,
            model.patch()
        )));
    }
    let c = grid.check_image(x_t)?;
    if c != model.channels() {
        return Err(Error::dim(format!("{c}-channel image for a {}-channel model", model.channels())));
    }
    let canvas = pad_canvas(x_t, grid.patch, t, spec.pad, sched, rng)?;
    let cond = collage_pass(model, x_t, t, &spec.positions, global, &canvas, &grid, spec.parallel)?;
    if spec.guidance == 0.0 {
        return Ok(cond);
    }
    let null = PositionPlan::null(grid.rows, grid.cols);
    let uncond = collage_pass(model, x_t, t, &null, None, &canvas, &grid, spec.parallel)?;
    cfg_combine(&cond, &uncond, spec.guidance)
}

/// One reverse update `x_t → x_{t_prev}` from a noise prediction.
pub(crate) fn reverse_update(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    spec: &SampleSpec,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let eps = if spec.clip_x0 {
        let x0 = predict_x0(x_t, eps, t, sched)?.clamp(-1.0, 1.0);
        let ab = sched.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip_with(&x0, |x, x0| (x - sa * x0) / sb)?
    } else {
        eps.clone()
    };
    match spec.sampler {
        Sampler::Ddpm if t_prev + 1 == t => {
            let z = Tensor::randn(x_t.shape(), rng);
            ddpm_step(x_t, &eps, t, sched, &z)
        }
        Sampler::Ddpm => {
            let z = Tensor::randn(x_t.shape(), rng);
            ddim_step(x_t, &eps, t, t_prev, sched, 1.0, Some(&z))
        }
        Sampler::Ddim { eta } if eta > 0.0 => {
            let z = Tensor::randn(x_t.shape(), rng);
            ddim_step(x_t, &eps, t, t_prev, sched, eta, Some(&z))
        }
        Sampler::Ddim { .. } => ddim_step(x_t, &eps, t, t_prev, sched, 0.0, None),
    }
}

/// Runs the reverse chain from `x_T ~ N(0, I)`. `eps_fn(x_t, t, k, rng)`
/// predicts noise at chain step `k` (0 for the first, noisiest step);
/// `after(x, t_prev, rng)` may edit the state after every update.
pub(crate) fn run_chain(
    spec: &SampleSpec,
    channels: usize,
    sched: &NoiseSchedule,
    mut eps_fn: impl FnMut(&Tensor, usize, usize, &mut ChaCha8Rng) -> Result<Tensor>,
    mut after: impl FnMut(&mut Tensor, usize, &mut ChaCha8Rng) -> Result<()>,
) -> Result<Tensor> {
    let ts = timestep_subsequence(sched.steps(), spec.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = Tensor::randn(&spec.shape(channels), &mut rng);
    for k in 0..ts.len() {
        let idx = ts.len() - 1 - k;
        let t = ts[idx];
        let t_prev = if idx == 0 { 0 } else { ts[idx - 1] };
        let eps = eps_fn(&x, t, k, &mut rng)?;
        x = reverse_update(&x, &eps, t, t_prev, spec, sched, &mut rng)?;
        after(&mut x, t_prev, &mut rng)?;
        x.ensure_finite("sample")?;
    }
    Ok(x.clamp(-1.0, 1.0))
}

/// Samples a full image with the collage sampler.
pub fn sample_image<M: PatchModel>(
    model: &M,
    sched: &NoiseSchedule,
    spec: &SampleSpec,
    global: Option<&Tensor>,
) -> Result<Tensor> {
    run_chain(
        spec,
        model.channels(),
        sched,
        |x, t, _, rng| denoise_once(model, x, t, spec, global, sched, rng),
        |_, _, _| Ok(()),
    )
}

#[cfg(test)]
mod tests;
