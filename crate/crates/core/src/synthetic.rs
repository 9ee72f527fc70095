//! Seeded synthetic data for desk-scale runs: smooth colour gradients with
//! flat geometric shapes, and bimodal code sets for the latent model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::compute::Tensor;

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)]
}

/// `n` RGB images of `size × size` in `[-1, 1]`: a linear two-colour gradient
/// background with one to three filled discs or rectangles.
pub fn toy_images(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| toy_image(size, &mut rng)).collect()
}

fn toy_image(size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (c0, c1) = (colour(rng), colour(rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let s = size as f64;
    let mut img = Tensor::zeros(&[3, size, size]);
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let u = ((y as f64 / s - 0.5) * dy + (x as f64 / s - 0.5) * dx) / std::f64::consts::SQRT_2 + 0.5;
            for ch in 0..3 {
                img.data_mut()[ch * plane + y * size + x] = c0[ch] * (1.0 - u) + c1[ch] * u;
            }
        }
    }
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let col = colour(rng);
        let cy = rng.random_range(0.15..0.85) * s;
        let cx = rng.random_range(0.15..0.85) * s;
        let r = rng.random_range(0.08..0.22) * s;
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let hit = if disc {
                    fy * fy + fx * fx <= r * r
                } else {
                    fy.abs() <= r && fx.abs() <= 0.7 * r
                };
                if hit {
                    for (ch, c) in col.iter().enumerate() {
                        img.data_mut()[ch * plane + y * size + x] = *c;
                    }
                }
            }
        }
    }
    img
}

/// Code set resembling an optimized embedding table: per-dimension offsets
/// and scales over unit noise, a few factors each shared by a small block of
/// dimensions, and one dimension carrying a bimodal factor.
#[derive(Clone, Debug)]
pub struct BimodalCodes {
    /// `[n, dim]` codes.
    pub codes: Tensor,
    /// Dimension carrying (almost only) the bimodal factor.
    pub marked: usize,
}

const FACTOR_BLOCK: usize = 8;
const FACTOR_WEIGHT: f64 = 0.7;

/// `n` codes of width `dim` with `factors` block factors; factor 0 is a
/// symmetric two-component mixture at ±1.5 with spread 0.3 and also drives
/// the marked dimension alone.
pub fn bimodal_codes(n: usize, dim: usize, factors: usize, seed: u64) -> BimodalCodes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = factors.max(1);
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let offset: Vec<f64> = (0..dim).map(|_| 0.5 * normal(&mut rng)).collect();
    let scale: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..1.5)).collect();
    let marked = 0;
    // Dimension d > 0 follows factor (d - 1) / FACTOR_BLOCK when one exists.
    let factor_of = |d: usize| {
        let k = d.checked_sub(1)? / FACTOR_BLOCK;
        (k < factors).then_some(k)
    };
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let mut s: Vec<f64> = (0..factors).map(|_| normal(&mut rng)).collect();
        let sign = if rng.random_bool(0.5) { 1.5 } else { -1.5 };
        s[0] = sign + 0.3 * normal(&mut rng);
        for d in 0..dim {
            let v = if d == marked {
                s[0] + 0.1 * normal(&mut rng)
            } else {
                let e = normal(&mut rng);
                let mixed = match factor_of(d) {
                    Some(k) => FACTOR_WEIGHT * s[k] + (1.0 - FACTOR_WEIGHT * FACTOR_WEIGHT).sqrt() * e,
                    None => e,
                };
                offset[d] + scale[d] * mixed
            };
            data.push(v);
        }
    }
    BimodalCodes {
        codes: Tensor::new(&[n, dim], data).expect("shape matches"),
        marked,
    }
}
