use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{map_patches, run_chain, PatchModel, SampleSpec};
use crate::compute::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{patchify, pixel_shift, pixel_unshift, PatchMap};
use crate::schedule::NoiseSchedule;

/// Samplers that decode every patch from its own features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// The original grid at every step.
    NoCollage,
    /// Original grid on even steps, half-patch shifted grid on odd steps.
    PixelFixed,
    /// A uniformly random pixel offset per step.
    PixelRandom,
}

/// Offset of the pixel decomposition used at chain step `k`.
pub fn pixel_offset<R: Rng + ?Sized>(mode: BaselineMode, k: usize, p: usize, rng: &mut R) -> (usize, usize) {
    match mode {
        BaselineMode::NoCollage => (0, 0),
        BaselineMode::PixelFixed if k.is_multiple_of(2) => (0, 0),
        BaselineMode::PixelFixed => (p / 2, p / 2),
        BaselineMode::PixelRandom => (rng.random_range(0..p), rng.random_range(0..p)),
    }
}

fn independent_pass<M: PatchModel>(
    model: &M,
    x_t: &Tensor,
    t: usize,
    spec: &SampleSpec,
    global: Option<&Tensor>,
    offset: Option<(usize, usize)>,
) -> Result<Tensor> {
    let grid = spec.grid;
    let p = grid.patch;
    let dim = model.pos_dim();
    let plan = spec.positions;
    let (patches, rows, cols, shift) = match offset {
        None => (patchify(x_t, &grid)?, grid.rows, grid.cols, (0.0, 0.0)),
        Some(o) => (
            pixel_shift(x_t, p, o)?,
            grid.rows + 1,
            grid.cols + 1,
            (o.0 as f64 / p as f64, o.1 as f64 / p as f64),
        ),
    };
    let indices: Vec<_> = (0..rows).flat_map(|a| (0..cols).map(move |b| (a, b))).collect();
    let decoded = map_patches(indices, spec.parallel, |a, b| {
        let pos = plan
            .at(a as f64 - shift.0, b as f64 - shift.1)
            .map(|(u, v)| crate::conditioning::pos_embed(u, v, dim))
            .transpose()?;
        let patch = patches.require(a, b)?;
        let z = model.encode(patch, t, pos.as_ref(), global)?;
        model.decode(&z, t, pos.as_ref(), global)
    })?;
    let mut out = PatchMap::new(rows, cols);
    for ((a, b), e) in decoded {
        out.insert(a, b, e)?;
    }
    match offset {
        None => crate::geometry::unpatchify(&out, &grid),
        Some(o) => pixel_unshift(&out, &grid, o),
    }
}

/// Samples with one of the non-collage decompositions.
pub fn baseline_sample<M: PatchModel>(
    mode: BaselineMode,
    model: &M,
    sched: &NoiseSchedule,
    spec: &SampleSpec,
    global: Option<&Tensor>,
) -> Result<Tensor> {
    if spec.grid.patch != model.patch() {
        return Err(Error::contract("grid patch differs from model patch"));
    }
    if spec.guidance != 0.0 {
        return Err(Error::contract("baseline samplers run without guidance"));
    }
    let p = spec.grid.patch;
    run_chain(
        spec,
        model.channels(),
        sched,
        |x, t, k, rng: &mut ChaCha8Rng| {
            let offset = match mode {
                BaselineMode::NoCollage => None,
                _ => Some(pixel_offset(mode, k, p, rng)),
            };
            independent_pass(model, x, t, spec, global, offset)
        },
        |_, _, _| Ok(()),
    )
}
