use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_image, PatchModel, SampleSpec};
use crate::compute::{ParamStore, Tensor};
use crate::conditioning::CodeStats;
use crate::error::{Error, Result};
use crate::network::LatentDenoiser;
use crate::schedule::{ddim_step, timestep_subsequence, NoiseSchedule};

/// A trained latent denoiser with the statistics its codes were standardized by.
#[derive(Clone, Copy, Debug)]
pub struct LatentPrior<'a> {
    pub net: &'a LatentDenoiser,
    pub store: &'a ParamStore,
    pub stats: Option<&'a CodeStats>,
    pub sched: &'a NoiseSchedule,
}

/// Draws `n` codes with a `steps`-step DDIM chain and undoes standardization.
pub fn sample_codes(prior: &LatentPrior<'_>, n: usize, steps: usize, eta: f64, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::contract("asked for zero codes"));
    }
    let dim = prior.net.config().dim;
    let ts = timestep_subsequence(prior.sched.steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::randn(&[n, dim], &mut rng);
    for idx in (0..ts.len()).rev() {
        let t = ts[idx];
        let t_prev = if idx == 0 { 0 } else { ts[idx - 1] };
        let eps = prior.net.latent_denoise(prior.store, &z, t)?;
        z = if eta > 0.0 {
            let noise = Tensor::randn(&[n, dim], &mut rng);
            ddim_step(&z, &eps, t, t_prev, prior.sched, eta, Some(&noise))?
        } else {
            ddim_step(&z, &eps, t, t_prev, prior.sched, 0.0, None)?
        };
        z.ensure_finite("latent sample")?;
    }
    match prior.stats {
        Some(s) => s.destandardize(&z),
        None => Ok(z),
    }
}

/// Samples a global code from the latent prior, then an image conditioned on it.
/// Returns `(image, code)`.
pub fn sample_unconditional<M: PatchModel>(
    model: &M,
    sched: &NoiseSchedule,
    spec: &SampleSpec,
    prior: &LatentPrior<'_>,
    latent_steps: usize,
) -> Result<(Tensor, Tensor)> {
    let codes = sample_codes(prior, 1, latent_steps, 0.0, spec.seed ^ 0x5eed)?;
    let code = codes.reshape(&[prior.net.config().dim])?;
    let image = sample_image(model, sched, spec, Some(&code))?;
    Ok((image, code))
}
