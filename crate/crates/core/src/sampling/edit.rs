use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;

use super::{denoise_once, run_chain, PatchModel, SampleSpec};
use crate::compute::Tensor;
use crate::conditioning::PositionPlan;
use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::schedule::{q_sample, NoiseSchedule};

/// A reference on the sampling canvas and the patches whose content is known.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSpec {
    /// Canvas-sized image; only the known patches are read.
    pub reference: Tensor,
    pub known: BTreeSet<(usize, usize)>,
}

impl EditSpec {
    /// Places `image` (an `R × C` grid) inside an `(R+2b) × (C+2b)` canvas and
    /// keeps its patches.
    pub fn outpaint(image: &Tensor, patch: usize, border: usize) -> Result<(Self, PatchGrid)> {
        let (c, h, w) = image.dims3()?;
        if h % patch != 0 || w % patch != 0 {
            return Err(Error::dim(format!("image {h}×{w} not divisible by patch {patch}")));
        }
        let (rows, cols) = (h / patch, w / patch);
        let grid = PatchGrid::new(rows + 2 * border, cols + 2 * border, patch)?;
        let mut reference = Tensor::zeros(&[c, grid.height(), grid.width()]);
        reference.paste(image, border * patch, border * patch)?;
        let known = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i + border, j + border)))
            .collect();
        Ok((Self { reference, known }, grid))
    }

    /// Keeps every patch of `image` except `masked`.
    pub fn inpaint(image: &Tensor, grid: &PatchGrid, masked: &[(usize, usize)]) -> Result<Self> {
        grid.check_image(image)?;
        let masked: BTreeSet<_> = masked.iter().copied().collect();
        if let Some(&(i, j)) = masked.iter().find(|&&(i, j)| i >= grid.rows || j >= grid.cols) {
            return Err(Error::contract(format!("masked patch ({i},{j}) outside the grid")));
        }
        if masked.is_empty() {
            return Err(Error::contract("inpainting needs at least one masked patch"));
        }
        if masked.len() == grid.len() {
            return Err(Error::contract("every patch is masked; sample the image instead"));
        }
        let known = grid.indices().filter(|k| !masked.contains(k)).collect();
        Ok(Self {
            reference: image.clone(),
            known,
        })
    }

    fn validate(&self, grid: &PatchGrid) -> Result<()> {
        grid.check_image(&self.reference)?;
        if let Some(&(i, j)) = self.known.iter().find(|&&(i, j)| i >= grid.rows || j >= grid.cols) {
            return Err(Error::contract(format!("known patch ({i},{j}) outside the grid")));
        }
        Ok(())
    }

    /// Overwrites known patches of `x` with the reference noised to `t`.
    fn replace(&self, x: &mut Tensor, t: usize, grid: &PatchGrid, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<()> {
        let source = if t == 0 {
            self.reference.clone()
        } else {
            let eps = Tensor::randn(self.reference.shape(), rng);
            q_sample(&self.reference, t, &eps, sched)?
        };
        let p = grid.patch;
        for &(i, j) in &self.known {
            x.paste(&source.crop(i * p, j * p, p, p)?, i * p, j * p)?;
        }
        Ok(())
    }
}

fn replacement_chain<M: PatchModel>(
    model: &M,
    sched: &NoiseSchedule,
    edit: &EditSpec,
    spec: &SampleSpec,
    global: Option<&Tensor>,
) -> Result<Tensor> {
    edit.validate(&spec.grid)?;
    run_chain(
        spec,
        model.channels(),
        sched,
        |x, t, _, rng| denoise_once(model, x, t, spec, global, sched, rng),
        |x, t_prev, rng| edit.replace(x, t_prev, &spec.grid, sched, rng),
    )
}

/// Generates the unknown canvas around the kept patches. `spec.grid` is the
/// canvas; positions normally come from [`PositionPlan::bordered`].
pub fn outpaint<M: PatchModel>(
    model: &M,
    sched: &NoiseSchedule,
    edit: &EditSpec,
    spec: &SampleSpec,
    global: Option<&Tensor>,
) -> Result<Tensor> {
    replacement_chain(model, sched, edit, spec, global)
}

/// Fills masked patches conditioned only on position embeddings.
pub fn inpaint<M: PatchModel>(model: &M, sched: &NoiseSchedule, edit: &EditSpec, spec: &SampleSpec) -> Result<Tensor> {
    if edit.known.len() == spec.grid.len() {
        return Err(Error::contract("nothing is masked"));
    }
    if edit.known.is_empty() {
        return Err(Error::contract("every patch is masked; sample the image instead"));
    }
    replacement_chain(model, sched, edit, spec, None)
}

/// Samples a `2R × 2C` grid whose patches interleave interpolated positions
/// with the `R × C` training grid.
pub fn extend_resolution_2x<M: PatchModel>(
    model: &M,
    sched: &NoiseSchedule,
    spec: &SampleSpec,
    global: Option<&Tensor>,
) -> Result<Tensor> {
    let g = spec.grid;
    let wide = SampleSpec {
        grid: PatchGrid::new(2 * g.rows, 2 * g.cols, g.patch)?,
        positions: PositionPlan::interpolated(g.rows, g.cols),
        ..spec.clone()
    };
    super::sample_image(model, sched, &wide, global)
}

/// Samples an `(R+2b) × (C+2b)` canvas; border patches use the null position.
pub fn extend_canvas<M: PatchModel>(
    model: &M,
    sched: &NoiseSchedule,
    spec: &SampleSpec,
    global: Option<&Tensor>,
    border: usize,
) -> Result<Tensor> {
    let g = spec.grid;
    let wide = SampleSpec {
        grid: PatchGrid::new(g.rows + 2 * border, g.cols + 2 * border, g.patch)?,
        positions: PositionPlan::bordered(g.rows, g.cols, border),
        ..spec.clone()
    };
    super::sample_image(model, sched, &wide, global)
}
