use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use super::seam::seam_score;
use crate::compute::Tensor;
use crate::conditioning::read_embedding_file;
use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::network::PatchDm;
use crate::sampling::{baseline_sample, sample_image, BaselineMode, SampleSpec};
use crate::schedule::NoiseSchedule;
use crate::training::evaluate_loss;

pub const METRICS_HEADER: &str = "seed,collage,no_collage,pixel_fixed,pixel_random,denoise_mse";

/// Paths of externally computed feature vectors for the Fréchet distance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FidHook {
    pub real: Option<PathBuf>,
    pub generated: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub seeds: usize,
    pub base_seed: u64,
    pub grid: PatchGrid,
    pub steps: usize,
    /// Timestep of the denoising MSE.
    pub fixed_t: usize,
    pub fid: Option<FidHook>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub seed: u64,
    pub collage: f64,
    pub no_collage: f64,
    pub pixel_fixed: f64,
    pub pixel_random: f64,
    pub denoise_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub fid: Option<f64>,
}

impl EvalReport {
    pub fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.seed, r.collage, r.no_collage, r.pixel_fixed, r.pixel_random, r.denoise_mse
            ));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Seam ratios of every sampler and the fixed-`t` denoising loss, one row per
/// seed. Seeds run in parallel; each owns its rng streams.
pub fn eval_suite(model: &PatchDm, sched: &NoiseSchedule, dataset: &[Tensor], opts: &EvalOptions) -> Result<EvalReport> {
    if opts.seeds == 0 {
        return Err(Error::contract("evaluation needs at least one seed"));
    }
    if dataset.is_empty() {
        return Err(Error::contract("evaluation dataset is empty"));
    }
    let fid = match &opts.fid {
        Some(hook) => {
            let (Some(real), Some(generated)) = (&hook.real, &hook.generated) else {
                return Err(Error::contract("FID requested but the feature hook not supplied"));
            };
            Some(frechet_distance(&read_features(real)?, &read_features(generated)?)?)
        }
        None => None,
    };
    let indexed: Vec<(usize, &Tensor)> = dataset.iter().enumerate().collect();
    let rows = (0..opts.seeds as u64)
        .into_par_iter()
        .map(|k| {
            let seed = opts.base_seed + k;
            let id = (k as usize) % dataset.len();
            let code = model.global_code(id, &dataset[id])?;
            let spec = SampleSpec {
                parallel: false,
                ..SampleSpec::new(opts.grid, opts.steps, seed)
            };
            let ratio = |img: Tensor| seam_score(&img, &opts.grid).map(|r| r.ratio);
            let base = |mode| baseline_sample(mode, model, sched, &spec, code.as_ref()).and_then(ratio);
            Ok(EvalRow {
                seed,
                collage: ratio(sample_image(model, sched, &spec, code.as_ref())?)?,
                no_collage: base(BaselineMode::NoCollage)?,
                pixel_fixed: base(BaselineMode::PixelFixed)?,
                pixel_random: base(BaselineMode::PixelRandom)?,
                denoise_mse: evaluate_loss(model, &indexed, sched, Some(opts.fixed_t), seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { rows, fid })
}

/// Reads a feature file in the embedding-import layout, any width.
pub fn read_features(path: &Path) -> Result<Tensor> {
    let head = fs::read(path).map_err(|e| Error::io(path, e))?;
    if head.len() < 8 {
        return Err(Error::format(path, "feature header truncated"));
    }
    let dim = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    read_embedding_file(path, dim)
}

fn moments(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = x.dims2()?;
    if n < 2 {
        return Err(Error::contract("need at least two feature vectors"));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(a.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁ Σ₂)^{1/2})` between two `[n, d]` feature sets.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims2()?.1 != b.dims2()?.1 {
        return Err(Error::dim("feature sets differ in width"));
    }
    let (m1, s1) = moments(a)?;
    let (m2, s2) = moments(b)?;
    // tr((Σ₁Σ₂)^{1/2}) = tr((√Σ₁ Σ₂ √Σ₁)^{1/2}), and the latter is symmetric.
    let r = sym_sqrt(&s1);
    let inner = &r * &s2 * &r;
    let cross: f64 = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}
