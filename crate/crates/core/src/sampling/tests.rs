use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::compute::gradcheck::jitter;
use crate::conditioning::EmbeddingSource;
use crate::network::{ModelConfig, PatchDm};
use crate::schedule::ScheduleConfig;
use crate::synthetic::toy_images;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Encoder emits the patch average-pooled once per level; decoder returns the
/// finest collaged map.
struct Stub {
    p: usize,
    levels: usize,
}

fn pool(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dims3().unwrap();
    Tensor::from_fn(&[c, h / 2, w / 2], |k| {
        let (ch, r) = (k / (h / 2 * w / 2), k % (h / 2 * w / 2));
        let (y, xx) = (2 * (r / (w / 2)), 2 * (r % (w / 2)));
        let at = |dy, dx| x.data()[(ch * h + y + dy) * w + xx + dx];
        (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0
    })
}

impl PatchModel for Stub {
    fn patch(&self) -> usize {
        self.p
    }
    fn channels(&self) -> usize {
        3
    }
    fn pos_dim(&self) -> usize {
        8
    }
    fn encode(&self, patch: &Tensor, _: usize, _: Option<&Tensor>, _: Option<&Tensor>) -> Result<FeatureStack> {
        let mut levels = vec![patch.clone()];
        for _ in 1..self.levels {
            levels.push(pool(levels.last().unwrap()));
        }
        Ok(FeatureStack(levels))
    }
    fn decode(&self, zc: &FeatureStack, _: usize, _: Option<&Tensor>, _: Option<&Tensor>) -> Result<Tensor> {
        Ok(zc.levels()[0].clone())
    }
}

fn sched() -> NoiseSchedule {
    ScheduleConfig::linear_default().build().unwrap()
}

fn toy_model(seed: u64) -> PatchDm {
    let mut m = PatchDm::new(ModelConfig::toy(2), seed, &EmbeddingSource::RandomNormal).unwrap();
    jitter(&mut m.store, 0.05, &mut rng(seed + 1));
    m
}

#[test]
fn stub_network_reproduces_input() {
    let stub = Stub { p: 8, levels: 3 };
    let s = sched();
    for (rows, cols) in [(1, 1), (2, 3), (4, 4)] {
        let grid = PatchGrid::new(rows, cols, 8).unwrap();
        let x = Tensor::randn(&[3, rows * 8, cols * 8], &mut rng(1));
        for pad in [InferencePad::Zeros, InferencePad::MatchedNoise] {
            for guidance in [0.0, 1.5] {
                let spec = SampleSpec {
                    pad,
                    guidance,
                    ..SampleSpec::new(grid, 10, 0)
                };
                let out = denoise_once(&stub, &x, 500, &spec, None, &s, &mut rng(2)).unwrap();
                if guidance == 0.0 {
                    assert_eq!(out, x);
                } else {
                    assert!(out.max_abs_diff(&x).unwrap() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn grid_mismatch_rejected() {
    let stub = Stub { p: 8, levels: 2 };
    let spec = SampleSpec::new(PatchGrid::new(2, 2, 8).unwrap(), 10, 0);
    let x = Tensor::zeros(&[3, 16, 24]);
    assert!(denoise_once(&stub, &x, 10, &spec, None, &sched(), &mut rng(0)).is_err());
}

#[test]
fn parallel_matches_sequential() {
    let m = toy_model(3);
    let s = sched();
    let grid = PatchGrid::new(2, 2, 16).unwrap();
    let x = Tensor::randn(&[3, 32, 32], &mut rng(4));
    let code = Tensor::randn(&[512], &mut rng(5)).scale(0.1);
    let par = SampleSpec::new(grid, 10, 0);
    let seq = SampleSpec { parallel: false, ..par.clone() };
    let a = denoise_once(&m, &x, 300, &par, Some(&code), &s, &mut rng(6)).unwrap();
    let b = denoise_once(&m, &x, 300, &seq, Some(&code), &s, &mut rng(6)).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
    assert_eq!(a.shape(), x.shape());
}

#[test]
fn deterministic_ddim_and_shapes() {
    let m = toy_model(7);
    let s = sched();
    let spec = SampleSpec::new(PatchGrid::new(2, 2, 16).unwrap(), 4, 11);
    let a = sample_image(&m, &s, &spec, None).unwrap();
    let b = sample_image(&m, &s, &spec, None).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));

    let wide = extend_resolution_2x(&m, &s, &spec, None).unwrap();
    assert_eq!(wide.shape(), &[3, 64, 64]);
    let canvas = extend_canvas(&m, &s, &spec, None, 1).unwrap();
    assert_eq!(canvas.shape(), &[3, 64, 64]);
    assert!(canvas.is_finite());
    assert_eq!(extend_canvas(&m, &s, &spec, None, 0).unwrap(), a);
}

#[test]
fn ddpm_and_guided_chains_run() {
    let m = toy_model(8);
    let s = sched();
    let spec = SampleSpec {
        sampler: Sampler::Ddpm,
        guidance: 1.0,
        ..SampleSpec::new(PatchGrid::new(1, 2, 16).unwrap(), 3, 1)
    };
    let out = sample_image(&m, &s, &spec, Some(&Tensor::zeros(&[512]))).unwrap();
    assert_eq!(out.shape(), &[3, 16, 32]);
}

#[test]
fn outpaint_keeps_reference() {
    let m = toy_model(9);
    let s = sched();
    let img = toy_images(1, 32, 3).remove(0);
    let (edit, grid) = EditSpec::outpaint(&img, 16, 1).unwrap();
    assert_eq!((grid.rows, grid.cols), (4, 4));
    let spec = SampleSpec {
        positions: crate::conditioning::PositionPlan::bordered(2, 2, 1),
        ..SampleSpec::new(grid, 3, 2)
    };
    let out = outpaint(&m, &s, &edit, &spec, None).unwrap();
    assert_eq!(out.crop(16, 16, 32, 32).unwrap(), img);
    assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn inpaint_keeps_unmasked_blocks() {
    let m = toy_model(10);
    let s = sched();
    let img = toy_images(1, 48, 4).remove(0);
    let grid = PatchGrid::new(3, 3, 16).unwrap();
    let blocks = [(0, 0), (1, 1), (2, 2), (0, 2), (2, 0), (1, 0)];
    for n in 1..=6 {
        let edit = EditSpec::inpaint(&img, &grid, &blocks[..n]).unwrap();
        let out = inpaint(&m, &s, &edit, &SampleSpec::new(grid, 2, n as u64)).unwrap();
        for (i, j) in grid.indices() {
            let same = out.crop(i * 16, j * 16, 16, 16).unwrap() == img.crop(i * 16, j * 16, 16, 16).unwrap();
            assert_eq!(same, !blocks[..n].contains(&(i, j)), "block ({i},{j}) with {n} masked");
        }
    }
    let edit = EditSpec::inpaint(&img, &grid, &blocks[..2]).unwrap();
    let a = inpaint(&m, &s, &edit, &SampleSpec::new(grid, 2, 1)).unwrap();
    let b = inpaint(&m, &s, &edit, &SampleSpec::new(grid, 2, 2)).unwrap();
    assert_ne!(a.crop(0, 0, 16, 16).unwrap(), b.crop(0, 0, 16, 16).unwrap());

    let all: Vec<_> = grid.indices().collect();
    assert!(matches!(EditSpec::inpaint(&img, &grid, &all), Err(Error::Contract(_))));
    assert!(matches!(EditSpec::inpaint(&img, &grid, &[]), Err(Error::Contract(_))));
}

#[test]
fn baselines_run() {
    let m = toy_model(12);
    let s = sched();
    let spec = SampleSpec::new(PatchGrid::new(2, 2, 16).unwrap(), 3, 5);
    for mode in [BaselineMode::NoCollage, BaselineMode::PixelFixed, BaselineMode::PixelRandom] {
        let out = baseline_sample(mode, &m, &s, &spec, None).unwrap();
        assert_eq!(out.shape(), &[3, 32, 32]);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn pixel_fixed_parity() {
    let mut r = rng(0);
    for k in 0..10 {
        let expect = if k % 2 == 0 { (0, 0) } else { (8, 8) };
        assert_eq!(pixel_offset(BaselineMode::PixelFixed, k, 16, &mut r), expect);
    }
}

#[test]
fn pixel_random_offsets_are_uniform() {
    let p = 16;
    let n = 10_000;
    let mut counts = vec![0usize; p * p];
    let mut r = rng(13);
    for k in 0..n {
        let (dy, dx) = pixel_offset(BaselineMode::PixelRandom, k, p, &mut r);
        counts[dy * p + dx] += 1;
    }
    let expected = n as f64 / (p * p) as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Wilson–Hilferty 99th percentile of χ² with p² − 1 degrees of freedom.
    let df = (p * p - 1) as f64;
    let a = 2.0 / (9.0 * df);
    let critical = df * (1.0 - a + 2.326_348 * a.sqrt()).powi(3);
    assert!(chi2 < critical, "{chi2} ≥ {critical}");
}

#[test]
fn latent_codes_shape_and_determinism() {
    use crate::network::{LatentDenoiser, LatentDenoiserConfig};
    let mut store = crate::compute::ParamStore::new();
    let mut r = rng(14);
    let cfg = LatentDenoiserConfig { hidden: 16, ..LatentDenoiserConfig::toy() };
    let net = LatentDenoiser::new(&mut crate::compute::ParamBuilder::new(&mut store, &mut r), cfg).unwrap();
    let s = ScheduleConfig::constant_default().build().unwrap();
    let prior = LatentPrior { net: &net, store: &store, stats: None, sched: &s };
    let a = sample_codes(&prior, 5, 20, 0.0, 1).unwrap();
    assert_eq!(a.shape(), &[5, 512]);
    assert_eq!(a, sample_codes(&prior, 5, 20, 0.0, 1).unwrap());

    let m = toy_model(15);
    let spec = SampleSpec::new(PatchGrid::new(1, 1, 16).unwrap(), 2, 3);
    let (img, code) = sample_unconditional(&m, &sched(), &spec, &prior, 10).unwrap();
    assert_eq!((img.shape(), code.shape()), (&[3, 16, 16][..], &[512][..]));
}
