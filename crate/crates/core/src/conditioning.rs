//! Position embeddings, per-image semantic codes, null tokens and
//! classifier-free guidance.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{ParamBuilder, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const POS_DIM: usize = 128;
pub const GLOBAL_DIM: usize = 512;

/// Sinusoidal encoding of continuous grid coordinates.
///
/// Layout: `[sin(ω_k u), cos(ω_k u), sin(ω_k v), cos(ω_k v)]`, each block of
/// length `dim/4`, with `ω_k = 100^(k/F)`, `F = dim/4`.
pub fn pos_embed(u: f64, v: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::config(format!("position dimension {dim} not divisible by 4")));
    }
    let f = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for coord in [u, v] {
        let freqs = (0..f).map(|k| 100f64.powf(k as f64 / f as f64) * coord);
        out.extend(freqs.clone().map(f64::sin));
        out.extend(freqs.map(f64::cos));
    }
    Tensor::new(&[dim], out)
}

/// Normalized coordinates of grid position `(i, j)` (possibly fractional) on
/// an `rows × cols` reference grid.
pub fn grid_coords(i: f64, j: f64, rows: usize, cols: usize) -> (f64, f64) {
    (i / rows as f64, j / cols as f64)
}

/// How canvas patches map to positions on the grid the model was trained on.
///
/// Canvas coordinates are converted to reference-grid units as
/// `(x − border) / scale`, where `x` is the shifted-patch index or, for the
/// padded patches seen by the encoder, the index minus one half.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionPlan {
    pub ref_rows: usize,
    pub ref_cols: usize,
    pub scale: f64,
    pub border: usize,
    /// Patches whose centre falls outside the reference field get no position.
    pub null_outside: bool,
    pub disabled: bool,
}

impl PositionPlan {
    /// Identity plan for a canvas equal to the reference grid.
    pub fn grid(rows: usize, cols: usize) -> Self {
        Self {
            ref_rows: rows,
            ref_cols: cols,
            scale: 1.0,
            border: 0,
            null_outside: false,
            disabled: false,
        }
    }

    /// A `2R × 2C` canvas whose positions interleave midpoints with the
    /// reference grid.
    pub fn interpolated(rows: usize, cols: usize) -> Self {
        Self {
            scale: 2.0,
            ..Self::grid(rows, cols)
        }
    }

    /// An `(R+2b) × (C+2b)` canvas whose border patches use the null token.
    pub fn bordered(rows: usize, cols: usize, border: usize) -> Self {
        Self {
            border,
            null_outside: true,
            ..Self::grid(rows, cols)
        }
    }

    /// Every patch uses the null token.
    pub fn null(rows: usize, cols: usize) -> Self {
        Self {
            disabled: true,
            ..Self::grid(rows, cols)
        }
    }

    fn resolve(&self, y: f64, x: f64, lo: f64, hi_pad: f64) -> Option<(f64, f64)> {
        if self.disabled {
            return None;
        }
        let u = (y - self.border as f64) / self.scale;
        let v = (x - self.border as f64) / self.scale;
        let inside = |c: f64, n: usize| c >= lo - 1e-9 && c <= n as f64 - 1.0 + hi_pad + 1e-9;
        if self.null_outside && !(inside(u, self.ref_rows) && inside(v, self.ref_cols)) {
            return None;
        }
        Some(grid_coords(u, v, self.ref_rows, self.ref_cols))
    }

    /// Normalized coordinates of shifted (decoder) patch `(i, j)`.
    pub fn shifted(&self, i: usize, j: usize) -> Option<(f64, f64)> {
        self.resolve(i as f64, j as f64, 0.0, 0.0)
    }

    /// Normalized coordinates of padded (encoder) patch `(a, b)`, centred half
    /// a patch before original patch `(a, b)`.
    pub fn padded(&self, a: usize, b: usize) -> Option<(f64, f64)> {
        self.resolve(a as f64 - 0.5, b as f64 - 0.5, -0.5, 0.5)
    }

    /// Normalized coordinates of a patch centred at fractional canvas index
    /// `(y, x)`, for decompositions that follow neither grid.
    pub fn at(&self, y: f64, x: f64) -> Option<(f64, f64)> {
        self.resolve(y, x, -0.5, 0.5)
    }

    pub fn embed_shifted(&self, i: usize, j: usize, dim: usize) -> Result<Option<Tensor>> {
        self.shifted(i, j).map(|(u, v)| pos_embed(u, v, dim)).transpose()
    }

    pub fn embed_padded(&self, a: usize, b: usize, dim: usize) -> Result<Option<Tensor>> {
        self.padded(a, b).map(|(u, v)| pos_embed(u, v, dim)).transpose()
    }
}

/// Conditioning for one patch evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub t: usize,
    pub pos: Tensor,
    pub global: Tensor,
    pub pos_is_null: bool,
    pub global_is_null: bool,
}

impl ConditionBundle {
    pub fn new(t: usize, pos: Tensor, global: Tensor) -> Self {
        Self {
            t,
            pos,
            global,
            pos_is_null: false,
            global_is_null: false,
        }
    }

    /// Same timestep with both conditions replaced by null tokens.
    pub fn unconditional(&self) -> Self {
        Self {
            pos_is_null: true,
            global_is_null: true,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    pub global: f64,
    pub pos: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self { global: 0.1, pos: 0.5 }
    }
}

impl DropoutRates {
    /// Independent `(global_dropped, pos_dropped)` draws.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (bool, bool) {
        let global = rng.random::<f64>() < self.global;
        let pos = rng.random::<f64>() < self.pos;
        (global, pos)
    }
}

pub fn cfg_dropout<R: Rng + ?Sized>(bundle: &ConditionBundle, rates: DropoutRates, rng: &mut R) -> ConditionBundle {
    let (global, pos) = rates.draw(rng);
    ConditionBundle {
        global_is_null: bundle.global_is_null || global,
        pos_is_null: bundle.pos_is_null || pos,
        ..bundle.clone()
    }
}

/// `(1 + w)·cond − w·uncond`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if w == 0.0 {
        eps_cond.same_shape(eps_uncond)?;
        return Ok(eps_cond.clone());
    }
    eps_cond.zip_with(eps_uncond, |c, u| (1.0 + w) * c - w * u)
}

/// Learned replacements for dropped conditions.
#[derive(Clone, Debug)]
pub struct NullTokens {
    pub pos: ParamId,
    pub global: ParamId,
}

impl NullTokens {
    pub fn new(pb: &mut ParamBuilder<'_>, pos_dim: usize, global_dim: usize) -> Result<Self> {
        Ok(Self {
            pos: pb.normal("pos", &[pos_dim], 0.02)?,
            global: pb.normal("global", &[global_dim], 0.02)?,
        })
    }
}

/// Per-dimension mean and standard deviation of a code table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CodeStats {
    /// Statistics over the rows of an `[n, dim]` matrix.
    pub fn fit(rows: &Tensor) -> Result<Self> {
        let (n, dim) = rows.dims2()?;
        if n == 0 {
            return Err(Error::contract("statistics of an empty table"));
        }
        let mut mean = vec![0.0; dim];
        for row in rows.data().chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; dim];
        for row in rows.data().chunks(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let dim = self.dim();
        if !x.len().is_multiple_of(dim) || x.is_empty() {
            return Err(Error::dim(format!("codes of shape {:?} for {dim}-d statistics", x.shape())));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = f(*v, *m, *s);
            }
        }
        Ok(out)
    }

    pub fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| v * s + m)
    }
}

/// Where the initial table rows come from.
#[derive(Clone, Debug)]
pub enum EmbeddingSource {
    /// Normal with standard deviation 0.02.
    RandomNormal,
    /// `[n, dim]` rows, e.g. read by [`read_embedding_file`].
    Imported(Tensor),
}

/// One trainable code per training image, stored as parameters
/// `<prefix>.<index>` of the model store.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<ParamId>,
    pub stats: Option<CodeStats>,
}

impl EmbeddingTable {
    pub fn init(pb: &mut ParamBuilder<'_>, count: usize, dim: usize, source: &EmbeddingSource) -> Result<Self> {
        if count == 0 {
            return Err(Error::config("embedding table needs at least one image"));
        }
        let rows = match source {
            EmbeddingSource::RandomNormal => (0..count)
                .map(|i| pb.normal(&i.to_string(), &[dim], 0.02))
                .collect::<Result<Vec<_>>>()?,
            EmbeddingSource::Imported(m) => {
                let (n, d) = m.dims2()?;
                if d != dim {
                    return Err(Error::config(format!("imported embeddings are {d}-d, expected {dim}")));
                }
                if n != count {
                    return Err(Error::config(format!("{n} imported embeddings for {count} images")));
                }
                (0..count)
                    .map(|i| pb.tensor(&i.to_string(), m.narrow0(i, 1)?.reshape(&[dim])?))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Self { dim, rows, stats: None })
    }

    /// Rebinds a table to rows already present in `store` under `prefix`.
    pub fn bind(store: &ParamStore, prefix: &str, count: usize, dim: usize) -> Result<Self> {
        let rows = (0..count)
            .map(|i| {
                let name = format!("{prefix}.{i}");
                let id = store
                    .find(&name)
                    .ok_or_else(|| Error::contract(format!("missing embedding row {name}")))?;
                if store.value(id).shape() != [dim] {
                    return Err(Error::dim(format!("embedding row {name} is not {dim}-d")));
                }
                Ok(id)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, rows, stats: None })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn param(&self, image_id: usize) -> Result<ParamId> {
        self.rows
            .get(image_id)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown image id {image_id} (table has {})", self.rows.len())))
    }

    pub fn lookup<'s>(&self, store: &'s ParamStore, image_id: usize) -> Result<&'s Tensor> {
        Ok(store.value(self.param(image_id)?))
    }

    /// All rows as an `[n, dim]` matrix.
    pub fn matrix(&self, store: &ParamStore) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for &id in &self.rows {
            data.extend_from_slice(store.value(id).data());
        }
        Tensor::new(&[self.len(), self.dim], data)
    }

    /// Recomputes standardization statistics over the whole table.
    pub fn refresh_stats(&mut self, store: &ParamStore) -> Result<&CodeStats> {
        let stats = CodeStats::fit(&self.matrix(store)?)?;
        Ok(self.stats.insert(stats))
    }
}

/// Reads `u32 count, u32 dim` (little endian) followed by row-major `f32`s.
pub fn read_embedding_file(path: &Path, expected_dim: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "embedding header truncated"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().expect("4 bytes")) as usize;
    let (count, dim) = (word(0), word(1));
    if dim != expected_dim {
        return Err(Error::format(path, format!("embedding dimension {dim}, expected {expected_dim}")));
    }
    let body = &bytes[8..];
    if body.len() != count * dim * 4 {
        return Err(Error::format(
            path,
            format!("{} body bytes for {count}×{dim} floats", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(&[count, dim], data)
}

pub fn write_embedding_file(path: &Path, rows: &Tensor) -> Result<()> {
    let (count, dim) = rows.dims2()?;
    let mut bytes = Vec::with_capacity(8 + 4 * rows.len());
    bytes.extend_from_slice(&(count as u32).to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in rows.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::{adam_step, AdamConfig, AdamState, Graph};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn origin_embedding() {
        let e = pos_embed(0.0, 0.0, 16).unwrap();
        for block in e.data().chunks(4).collect::<Vec<_>>().chunks(2) {
            assert!(block[0].iter().all(|&s| s == 0.0));
            assert!(block[1].iter().all(|&c| c == 1.0));
        }
        assert!(matches!(pos_embed(0.0, 0.0, 10), Err(Error::Config(_))));
    }

    #[test]
    fn grid_embeddings_are_distinct() {
        for (rows, cols) in [(4, 4), (8, 16), (6, 6)] {
            let embs: Vec<Tensor> = (0..rows)
                .flat_map(|i| (0..cols).map(move |j| (i, j)))
                .map(|(i, j)| {
                    let (u, v) = grid_coords(i as f64, j as f64, rows, cols);
                    pos_embed(u, v, POS_DIM).unwrap()
                })
                .collect();
            let mut closest = f64::INFINITY;
            for a in 0..embs.len() {
                for b in a + 1..embs.len() {
                    closest = closest.min(embs[a].mse(&embs[b]).unwrap());
                }
            }
            assert!(closest > 1e-4, "{rows}×{cols}: {closest}");
        }
    }

    #[test]
    fn interpolated_midpoint_between_neighbours() {
        // On the doubled grid, odd column 2j+1 sits halfway between j and j+1.
        let (u, v) = grid_coords(2.0 * 1.0, 2.0 * 2.0 + 1.0, 8, 8);
        let (u0, v0) = grid_coords(1.0, 2.5, 4, 4);
        assert_eq!((u, v), (u0, v0));
        let (a, b) = grid_coords(2.0 * 3.0, 2.0 * 1.0, 8, 8);
        assert_eq!((a, b), grid_coords(3.0, 1.0, 4, 4));
    }

    #[test]
    fn position_plans() {
        let g = PositionPlan::grid(4, 4);
        assert_eq!(g.shifted(1, 2), Some((0.25, 0.5)));
        assert_eq!(g.padded(0, 0), Some((-0.125, -0.125)));

        // Every reference coordinate reappears on the doubled grid.
        let i2 = PositionPlan::interpolated(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(i2.shifted(2 * i, 2 * j), g.shifted(i, j));
            }
        }
        assert_eq!(i2.shifted(2, 5), Some(grid_coords(1.0, 2.5, 4, 4)));

        let b = PositionPlan::bordered(4, 4, 1);
        assert_eq!(b.shifted(0, 3), None);
        assert_eq!(b.shifted(1, 1), g.shifted(0, 0));
        assert_eq!(b.shifted(4, 4), g.shifted(3, 3));
        assert_eq!(b.shifted(5, 1), None);
        assert_eq!(b.padded(1, 1), g.padded(0, 0));
        assert_eq!(b.padded(5, 5), g.padded(4, 4));
        assert_eq!(b.padded(0, 2), None);
        assert_eq!(b.padded(6, 2), None);
        assert_eq!(PositionPlan::null(4, 4).shifted(0, 0), None);
    }

    #[test]
    fn dropout_rates_and_independence() {
        let rates = DropoutRates::default();
        let n = 100_000;
        let mut r = rng(1);
        let (mut g, mut p, mut both) = (0usize, 0usize, 0usize);
        for _ in 0..n {
            let (dg, dp) = rates.draw(&mut r);
            g += dg as usize;
            p += dp as usize;
            both += (dg && dp) as usize;
        }
        let (fg, fp, fb) = (g as f64 / n as f64, p as f64 / n as f64, both as f64 / n as f64);
        assert!((fg - 0.1).abs() < 0.01);
        assert!((fp - 0.5).abs() < 0.01);
        assert!((fb - fg * fp).abs() < 0.01);
    }

    #[test]
    fn dropout_is_seeded() {
        let b = ConditionBundle::new(5, Tensor::zeros(&[8]), Tensor::zeros(&[4]));
        let draw = |seed| {
            let mut r = rng(seed);
            (0..64)
                .map(|_| {
                    let d = cfg_dropout(&b, DropoutRates::default(), &mut r);
                    (d.global_is_null, d.pos_is_null)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn guidance_combination() {
        let c = Tensor::ones(&[3]);
        let u = Tensor::zeros(&[3]);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        assert!(cfg_combine(&c, &u, 2.0).unwrap().data().iter().all(|&v| v == 3.0));
        assert!(cfg_combine(&c, &Tensor::zeros(&[2]), 1.0).is_err());
    }

    #[test]
    fn import_round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.bin");
        let m = Tensor::from_fn(&[3, GLOBAL_DIM], |k| ((k as f32) * 0.001) as f64);
        write_embedding_file(&path, &m).unwrap();
        let back = read_embedding_file(&path, GLOBAL_DIM).unwrap();
        assert_eq!(back, m);
        assert!(matches!(read_embedding_file(&path, 256), Err(Error::Format { .. })));

        let mut store = ParamStore::new();
        let mut r = rng(2);
        let mut pb = ParamBuilder::new(&mut store, &mut r);
        let table = EmbeddingTable::init(&mut pb.sub("embedding"), 3, GLOBAL_DIM, &EmbeddingSource::Imported(back)).unwrap();
        assert_eq!(table.len(), 3);
        assert_eq!(table.lookup(&store, 2).unwrap(), &m.narrow0(2, 1).unwrap().reshape(&[GLOBAL_DIM]).unwrap());
        assert!(matches!(table.lookup(&store, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_import_dimension_rejected() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let mut pb = ParamBuilder::new(&mut store, &mut r);
        let bad = EmbeddingSource::Imported(Tensor::zeros(&[2, 100]));
        assert!(matches!(EmbeddingTable::init(&mut pb, 2, GLOBAL_DIM, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn rows_move_under_optimization() {
        let mut store = ParamStore::new();
        let mut r = rng(4);
        let table = EmbeddingTable::init(&mut ParamBuilder::new(&mut store, &mut r), 4, 8, &EmbeddingSource::RandomNormal).unwrap();
        let before = table.matrix(&store).unwrap();
        let mut adam = AdamState::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &store);
        let grads = {
            let mut g = Graph::new(&store);
            let row = g.param(table.param(1).unwrap());
            let loss = g.mse_to(row, Tensor::ones(&[8])).unwrap();
            g.backward(loss).unwrap().into_params()
        };
        adam_step(&mut store, &grads, &mut adam).unwrap();
        let after = table.matrix(&store).unwrap();
        assert_ne!(after.narrow0(1, 1).unwrap(), before.narrow0(1, 1).unwrap());
        assert_eq!(after.narrow0(0, 1).unwrap(), before.narrow0(0, 1).unwrap());
    }

    #[test]
    fn standardization_inverts() {
        let m = Tensor::randn(&[50, 6], &mut rng(5)).map(|v| 3.0 * v + 1.5);
        let stats = CodeStats::fit(&m).unwrap();
        let z = stats.standardize(&m).unwrap();
        let zs = CodeStats::fit(&z).unwrap();
        assert!(zs.mean.iter().all(|v| v.abs() < 1e-12));
        assert!(zs.std.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(stats.destandardize(&z).unwrap().max_abs_diff(&m).unwrap() < 1e-12);
    }

    proptest! {
        #[test]
        fn embedding_bounded_and_pure(u in -10.0f64..10.0, v in -10.0f64..10.0) {
            let a = pos_embed(u, v, 32).unwrap();
            prop_assert!(a.data().iter().all(|x| x.abs() <= 1.0));
            prop_assert_eq!(a, pos_embed(u, v, 32).unwrap());
        }

        #[test]
        fn combine_is_affine(c in -5.0f64..5.0, u in -5.0f64..5.0, w in -3.0f64..3.0) {
            let ct = Tensor::full(&[2], c);
            let ut = Tensor::full(&[2], u);
            let out = cfg_combine(&ct, &ut, w).unwrap().data()[0];
            prop_assert!((out - (c + w * (c - u))).abs() < 1e-9);
            prop_assert!((cfg_combine(&ct, &ct, w).unwrap().data()[0] - c).abs() < 1e-12);
        }
    }
}
