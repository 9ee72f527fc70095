//! Patch-grid algebra.
//!
//! Patch `(i, j)` of a [`PatchGrid`] covers pixel rows `[i·p, (i+1)·p)` and
//! columns `[j·p, (j+1)·p)`. Padding the image by `p/2` on every side yields an
//! `(R+1)×(C+1)` grid whose four patches around each interior corner carry,
//! between them, exactly the features of one original-grid patch: the shifted
//! patch `(i, j)` is assembled from the shared-corner quadrants of padded
//! patches `(i, j)`, `(i, j+1)`, `(i+1, j)` and `(i+1, j+1)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compute::{tile2x2, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || patch == 0 {
            return Err(Error::config(format!("empty grid {rows}×{cols} with patch {patch}")));
        }
        if !patch.is_multiple_of(2) {
            return Err(Error::config(format!("patch size {patch} must be even")));
        }
        Ok(Self { rows, cols, patch })
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `(R+1)×(C+1)` grid of the half-patch padded canvas.
    pub fn padded(&self) -> PatchGrid {
        PatchGrid {
            rows: self.rows + 1,
            cols: self.cols + 1,
            patch: self.patch,
        }
    }

    pub fn indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |i| (0..self.cols).map(move |j| (i, j)))
    }

    /// Checks that `img` is C×(R·p)×(C·p).
    pub fn check_image(&self, img: &Tensor) -> Result<usize> {
        let (c, h, w) = img.dims3()?;
        if h != self.height() || w != self.width() {
            return Err(Error::dim(format!(
                "image {h}×{w} does not match {}×{} grid of {}-pixel patches",
                self.rows, self.cols, self.patch
            )));
        }
        Ok(c)
    }
}

/// Sparse `(i, j) → T` table over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMap<T> {
    rows: usize,
    cols: usize,
    slots: Vec<Option<T>>,
}

impl<T> PatchMap<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            slots: (0..rows * cols).map(|_| None).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        (i < self.rows && j < self.cols).then_some(i * self.cols + j)
    }

    pub fn insert(&mut self, i: usize, j: usize, value: T) -> Result<()> {
        let s = self
            .slot(i, j)
            .ok_or_else(|| Error::contract(format!("patch ({i},{j}) outside {}×{}", self.rows, self.cols)))?;
        self.slots[s] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&T> {
        self.slot(i, j).and_then(|s| self.slots[s].as_ref())
    }

    pub fn remove(&mut self, i: usize, j: usize) -> Option<T> {
        self.slot(i, j).and_then(|s| self.slots[s].take())
    }

    pub fn require(&self, i: usize, j: usize) -> Result<&T> {
        self.get(i, j)
            .ok_or_else(|| Error::contract(format!("missing patch ({i},{j})")))
    }

    /// Present entries in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &T)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(move |(s, v)| v.as_ref().map(|v| ((s / self.cols, s % self.cols), v)))
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PatchMap<U> {
        PatchMap {
            rows: self.rows,
            cols: self.cols,
            slots: self.slots.iter().map(|s| s.as_ref().map(&mut f)).collect(),
        }
    }

    /// Builds a full map from row-major values.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::contract(format!(
                "{} values for a {rows}×{cols} map",
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            slots: values.into_iter().map(Some).collect(),
        })
    }
}

/// Ordered per-level feature maps of one patch, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack(pub Vec<Tensor>);

impl FeatureStack {
    pub fn levels(&self) -> &[Tensor] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    /// `(y0, x0, h, w)` of this quadrant in an `h2×w2` map.
    pub fn rect(self, h2: usize, w2: usize) -> (usize, usize, usize, usize) {
        let (h, w) = (h2 / 2, w2 / 2);
        match self {
            Quadrant::TopLeft => (0, 0, h, w),
            Quadrant::TopRight => (0, w, h, w),
            Quadrant::BottomLeft => (h, 0, h, w),
            Quadrant::BottomRight => (h, w, h, w),
        }
    }

    pub fn crop(self, map: &Tensor) -> Result<Tensor> {
        let (_, h, w) = map.dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("quadrant split of odd extent {h}×{w}")));
        }
        let (y0, x0, qh, qw) = self.rect(h, w);
        map.crop(y0, x0, qh, qw)
    }
}

/// Which source quadrant feeds each output quadrant of a shifted patch, in
/// output order TL, TR, BL, BR; sources are padded patches `(i, j)`,
/// `(i, j+1)`, `(i+1, j)`, `(i+1, j+1)`.
pub const COLLAGE_SOURCES: [Quadrant; 4] = [
    Quadrant::BottomRight,
    Quadrant::BottomLeft,
    Quadrant::TopRight,
    Quadrant::TopLeft,
];

pub fn patchify(img: &Tensor, grid: &PatchGrid) -> Result<PatchMap<Tensor>> {
    grid.check_image(img)?;
    let p = grid.patch;
    let mut out = PatchMap::new(grid.rows, grid.cols);
    for (i, j) in grid.indices() {
        out.insert(i, j, img.crop(i * p, j * p, p, p)?)?;
    }
    Ok(out)
}

pub fn unpatchify(patches: &PatchMap<Tensor>, grid: &PatchGrid) -> Result<Tensor> {
    if patches.rows() != grid.rows || patches.cols() != grid.cols {
        return Err(Error::dim(format!(
            "{}×{} patch map for a {}×{} grid",
            patches.rows(),
            patches.cols(),
            grid.rows,
            grid.cols
        )));
    }
    let p = grid.patch;
    let first = patches.require(0, 0)?;
    let (c, ph, pw) = first.dims3()?;
    if ph != p || pw != p {
        return Err(Error::dim(format!("patches are {ph}×{pw}, grid expects {p}×{p}")));
    }
    let mut img = Tensor::zeros(&[c, grid.height(), grid.width()]);
    for (i, j) in grid.indices() {
        let patch = patches.require(i, j)?;
        if patch.shape() != first.shape() {
            return Err(Error::dim(format!("patch ({i},{j}) has shape {:?}", patch.shape())));
        }
        img.paste(patch, i * p, j * p)?;
    }
    Ok(img)
}

/// Border fill of [`pad_half_patch`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadFill {
    Zeros,
    /// Independent Gaussian noise of this standard deviation.
    Noise { sigma: f64 },
}

/// Pads `p/2` pixels on every side.
pub fn pad_half_patch<R: Rng + ?Sized>(img: &Tensor, p: usize, fill: PadFill, rng: &mut R) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if !p.is_multiple_of(2) {
        return Err(Error::config(format!("patch size {p} must be even")));
    }
    let half = p / 2;
    let mut out = match fill {
        PadFill::Zeros => Tensor::zeros(&[c, h + p, w + p]),
        PadFill::Noise { sigma } => {
            Tensor::from_fn(&[c, h + p, w + p], |_| sigma * rng.sample::<f64, _>(StandardNormal))
        }
    };
    out.paste(img, half, half)?;
    Ok(out)
}

/// Inverse of [`pad_half_patch`].
pub fn unpad_half_patch(padded: &Tensor, p: usize) -> Result<Tensor> {
    let (_, h, w) = padded.dims3()?;
    if h < p || w < p {
        return Err(Error::dim(format!("{h}×{w} canvas smaller than one patch {p}")));
    }
    padded.crop(p / 2, p / 2, h - p, w - p)
}

/// Assembles one level of a shifted patch from the four neighbouring maps
/// `[z(i,j), z(i,j+1), z(i+1,j), z(i+1,j+1)]`.
pub fn collage_level(maps: [&Tensor; 4]) -> Result<Tensor> {
    let shape = maps[0].shape();
    if maps.iter().any(|m| m.shape() != shape) {
        return Err(Error::dim("collage neighbours differ in shape"));
    }
    let parts = [
        COLLAGE_SOURCES[0].crop(maps[0])?,
        COLLAGE_SOURCES[1].crop(maps[1])?,
        COLLAGE_SOURCES[2].crop(maps[2])?,
        COLLAGE_SOURCES[3].crop(maps[3])?,
    ];
    tile2x2([&parts[0], &parts[1], &parts[2], &parts[3]])
}

/// Feature stack of shifted patch `(i, j)` from the padded-grid stacks `z`.
pub fn collage_features(z: &PatchMap<FeatureStack>, i: usize, j: usize) -> Result<FeatureStack> {
    if i + 1 >= z.rows() || j + 1 >= z.cols() {
        return Err(Error::contract(format!(
            "shifted patch ({i},{j}) needs neighbours inside the {}×{} padded grid",
            z.rows(),
            z.cols()
        )));
    }
    let n = [
        z.require(i, j)?,
        z.require(i, j + 1)?,
        z.require(i + 1, j)?,
        z.require(i + 1, j + 1)?,
    ];
    let levels = n[0].len();
    if n.iter().any(|s| s.len() != levels) {
        return Err(Error::dim("neighbouring feature stacks differ in depth"));
    }
    let out = (0..levels)
        .map(|k| collage_level([&n[0].0[k], &n[1].0[k], &n[2].0[k], &n[3].0[k]]))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureStack(out))
}

/// Region of the unpadded `full_plane` covered by shifted patch `(i, j)`.
pub fn extract_shifted_target(full_plane: &Tensor, grid: &PatchGrid, i: usize, j: usize) -> Result<Tensor> {
    grid.check_image(full_plane)?;
    if i >= grid.rows || j >= grid.cols {
        return Err(Error::contract(format!(
            "shifted patch ({i},{j}) outside {}×{} grid",
            grid.rows, grid.cols
        )));
    }
    let p = grid.patch;
    full_plane.crop(i * p, j * p, p, p)
}

/// Patches of the `(H+p)×(W+p)` zero canvas with `img` placed at `offset`.
pub fn pixel_shift(img: &Tensor, p: usize, offset: (usize, usize)) -> Result<PatchMap<Tensor>> {
    let (c, h, w) = img.dims3()?;
    let (dy, dx) = offset;
    if dy >= p || dx >= p {
        return Err(Error::contract(format!("offset ({dy},{dx}) outside [0,{p})²")));
    }
    if h % p != 0 || w % p != 0 {
        return Err(Error::dim(format!("image {h}×{w} not divisible by patch {p}")));
    }
    let grid = PatchGrid::new(h / p + 1, w / p + 1, p)?;
    let mut canvas = Tensor::zeros(&[c, h + p, w + p]);
    canvas.paste(img, dy, dx)?;
    patchify(&canvas, &grid)
}

/// Reassembles a [`pixel_shift`] decomposition and crops the image back out.
pub fn pixel_unshift(patches: &PatchMap<Tensor>, grid: &PatchGrid, offset: (usize, usize)) -> Result<Tensor> {
    let canvas = unpatchify(patches, &grid.padded())?;
    canvas.crop(offset.0, offset.1, grid.height(), grid.width())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patch_counts() {
        let g = PatchGrid::new(4, 4, 64).unwrap();
        let img = Tensor::zeros(&[3, 256, 256]);
        assert_eq!(patchify(&img, &g).unwrap().len(), 16);

        let g = PatchGrid::new(8, 16, 64).unwrap();
        let img = Tensor::zeros(&[3, 512, 1024]);
        let m = patchify(&img, &g).unwrap();
        assert_eq!((m.rows(), m.cols(), m.len()), (8, 16, 128));
    }

    #[test]
    fn single_patch_grid_is_the_image() {
        let img = Tensor::randn(&[3, 8, 8], &mut rng(1));
        let g = PatchGrid::new(1, 1, 8).unwrap();
        assert_eq!(patchify(&img, &g).unwrap().get(0, 0), Some(&img));
    }

    #[test]
    fn bad_sizes() {
        let g = PatchGrid::new(2, 2, 8).unwrap();
        assert!(matches!(patchify(&Tensor::zeros(&[3, 16, 15]), &g), Err(Error::Dimension(_))));
        assert!(matches!(PatchGrid::new(2, 2, 7), Err(Error::Config(_))));
    }

    #[test]
    fn unpatchify_constant_and_missing() {
        let g = PatchGrid::new(2, 3, 4).unwrap();
        let mut m = PatchMap::new(2, 3);
        for (i, j) in g.indices() {
            m.insert(i, j, Tensor::full(&[1, 4, 4], 0.25)).unwrap();
        }
        assert!(unpatchify(&m, &g).unwrap().data().iter().all(|&v| v == 0.25));
        m.remove(1, 2);
        assert!(matches!(unpatchify(&m, &g), Err(Error::Contract(_))));
    }

    #[test]
    fn shuffled_patches_restore_by_index() {
        let g = PatchGrid::new(3, 4, 4).unwrap();
        let img = Tensor::randn(&[2, 12, 16], &mut rng(2));
        let m = patchify(&img, &g).unwrap();
        let mut entries: Vec<_> = m.iter().map(|(k, v)| (k, v.clone())).collect();
        entries.shuffle(&mut rng(3));
        let mut rebuilt = PatchMap::new(3, 4);
        for ((i, j), v) in entries {
            rebuilt.insert(i, j, v).unwrap();
        }
        assert_eq!(unpatchify(&rebuilt, &g).unwrap(), img);
    }

    #[test]
    fn padding_modes() {
        let img = Tensor::randn(&[3, 8, 8], &mut rng(4));
        let padded = pad_half_patch(&img, 4, PadFill::Zeros, &mut rng(5)).unwrap();
        assert_eq!(padded.shape(), &[3, 12, 12]);
        assert_eq!(unpad_half_patch(&padded, 4).unwrap(), img);
        let border: f64 = padded.data().iter().map(|v| v.abs()).sum::<f64>()
            - img.data().iter().map(|v| v.abs()).sum::<f64>();
        assert!(border.abs() < 1e-9);
    }

    #[test]
    fn noise_padding_statistics() {
        let sigma = 0.37;
        // 3 × (232² − 200²) ≈ 41k border pixels per draw; three draws exceed 10⁵.
        let img = Tensor::zeros(&[3, 200, 200]);
        let mut r = rng(6);
        let mut border = Vec::new();
        for _ in 0..3 {
            let padded = pad_half_patch(&img, 32, PadFill::Noise { sigma }, &mut r).unwrap();
            for ch in 0..3 {
                for y in 0..232 {
                    for x in 0..232 {
                        let inside = (16..216).contains(&y) && (16..216).contains(&x);
                        if !inside {
                            border.push(padded.data()[(ch * 232 + y) * 232 + x]);
                        }
                    }
                }
            }
        }
        assert!(border.len() >= 100_000);
        let n = border.len() as f64;
        let mean = border.iter().sum::<f64>() / n;
        let std = (border.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - sigma).abs() / sigma < 0.05);
    }

    #[test]
    fn constant_stacks_collage_to_constant() {
        let mut z = PatchMap::new(2, 2);
        for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            z.insert(a, b, FeatureStack(vec![Tensor::full(&[2, 4, 4], 3.0), Tensor::full(&[4, 2, 2], -1.0)]))
                .unwrap();
        }
        let out = collage_features(&z, 0, 0).unwrap();
        assert!(out.0[0].data().iter().all(|&v| v == 3.0));
        assert!(out.0[1].data().iter().all(|&v| v == -1.0));
    }

    /// Splits a full-resolution pyramid into per-padded-patch stacks.
    fn split_pyramid(planes: &[Tensor], rows: usize, cols: usize) -> PatchMap<FeatureStack> {
        let mut z = PatchMap::new(rows, cols);
        for a in 0..rows {
            for b in 0..cols {
                let levels = planes
                    .iter()
                    .map(|pl| {
                        let s = pl.shape()[1] / rows;
                        pl.crop(a * s, b * s, s, s).unwrap()
                    })
                    .collect();
                z.insert(a, b, FeatureStack(levels)).unwrap();
            }
        }
        z
    }

    #[test]
    fn collage_equals_half_shifted_crop_of_full_plane() {
        let mut r = rng(7);
        let (rows, cols) = (4, 5);
        let planes: Vec<Tensor> = [(3, 8), (5, 4), (2, 2)]
            .iter()
            .map(|&(c, s)| Tensor::randn(&[c, rows * s, cols * s], &mut r))
            .collect();
        let z = split_pyramid(&planes, rows, cols);
        for i in 0..rows - 1 {
            for j in 0..cols - 1 {
                let out = collage_features(&z, i, j).unwrap();
                for (lvl, pl) in planes.iter().enumerate() {
                    let s = pl.shape()[1] / rows;
                    let expect = pl.crop(i * s + s / 2, j * s + s / 2, s, s).unwrap();
                    assert_eq!(out.0[lvl], expect);
                }
            }
        }
    }

    #[test]
    fn three_by_three_illustration() {
        // Padded 4×4 grid around a 3×3 image; the middle shifted patch (1,1)
        // draws from padded (1,1), (1,2), (2,1), (2,2).
        let mut z = PatchMap::new(4, 4);
        for a in 0..4 {
            for b in 0..4 {
                let tag = (10 * a + b) as f64;
                z.insert(a, b, FeatureStack(vec![Tensor::full(&[1, 2, 2], tag)])).unwrap();
            }
        }
        let out = collage_features(&z, 1, 1).unwrap();
        assert_eq!(out.0[0].data(), &[11.0, 12.0, 21.0, 22.0]);
    }

    #[test]
    fn collage_errors() {
        let mut z = PatchMap::new(2, 2);
        for (a, b) in [(0, 0), (0, 1), (1, 0)] {
            z.insert(a, b, FeatureStack(vec![Tensor::zeros(&[1, 2, 2])])).unwrap();
        }
        assert!(matches!(collage_features(&z, 0, 0), Err(Error::Contract(_))));
        assert!(matches!(collage_features(&z, 1, 0), Err(Error::Contract(_))));
        let mut odd = PatchMap::new(2, 2);
        for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            odd.insert(a, b, FeatureStack(vec![Tensor::zeros(&[1, 3, 3])])).unwrap();
        }
        assert!(matches!(collage_features(&odd, 0, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn shifted_targets_tile_the_plane() {
        let g = PatchGrid::new(3, 2, 4).unwrap();
        let eps = Tensor::randn(&[3, 12, 8], &mut rng(8));
        let mut m = PatchMap::new(3, 2);
        let mut covered = 0;
        for (i, j) in g.indices() {
            let t = extract_shifted_target(&eps, &g, i, j).unwrap();
            covered += t.len() / 3;
            m.insert(i, j, t).unwrap();
        }
        assert_eq!(covered, 12 * 8);
        assert_eq!(m.get(0, 0).unwrap(), &eps.crop(0, 0, 4, 4).unwrap());
        assert_eq!(unpatchify(&m, &g).unwrap(), eps);
        assert!(matches!(extract_shifted_target(&eps, &g, 3, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn pixel_shift_offsets() {
        let img = Tensor::randn(&[1, 8, 8], &mut rng(9));
        let g = PatchGrid::new(2, 2, 4).unwrap();
        let zero = pixel_shift(&img, 4, (0, 0)).unwrap();
        let mut canvas = Tensor::zeros(&[1, 12, 12]);
        canvas.paste(&img, 0, 0).unwrap();
        assert_eq!(zero, patchify(&canvas, &g.padded()).unwrap());

        let half = pixel_shift(&img, 4, (2, 2)).unwrap();
        let padded = pad_half_patch(&img, 4, PadFill::Zeros, &mut rng(0)).unwrap();
        assert_eq!(half, patchify(&padded, &g.padded()).unwrap());
        assert_eq!(pixel_unshift(&half, &g, (2, 2)).unwrap(), img);
        assert!(matches!(pixel_shift(&img, 4, (4, 0)), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(rows in 1usize..5, cols in 1usize..5, half in 1usize..4, seed in 0u64..1000) {
            let p = 2 * half;
            let g = PatchGrid::new(rows, cols, p).unwrap();
            let img = Tensor::randn(&[2, rows * p, cols * p], &mut rng(seed));
            prop_assert_eq!(unpatchify(&patchify(&img, &g).unwrap(), &g).unwrap(), img);
        }

        #[test]
        fn pixel_shift_round_trip(dy in 0usize..6, dx in 0usize..6, seed in 0u64..100) {
            let g = PatchGrid::new(2, 3, 6).unwrap();
            let img = Tensor::randn(&[1, 12, 18], &mut rng(seed));
            let m = pixel_shift(&img, 6, (dy, dx)).unwrap();
            prop_assert_eq!(pixel_unshift(&m, &g, (dy, dx)).unwrap(), img);
        }
    }
}
