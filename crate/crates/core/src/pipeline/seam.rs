use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::error::{Error, Result};
use crate::geometry::PatchGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeamAxis {
    /// Between columns `k·p − 1` and `k·p`.
    Vertical,
    /// Between rows `k·p − 1` and `k·p`.
    Horizontal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamLine {
    pub axis: SeamAxis,
    pub index: usize,
    pub mean: f64,
}

/// Mean absolute neighbour difference across patch boundaries versus inside patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamReport {
    pub seam_mean: f64,
    pub interior_mean: f64,
    /// `seam_mean / max(interior_mean, ε)`; 1 when both are zero.
    pub ratio: f64,
    pub seams: Vec<SeamLine>,
}

pub fn seam_score(img: &Tensor, grid: &PatchGrid) -> Result<SeamReport> {
    let c = grid.check_image(img)?;
    if grid.rows * grid.cols < 2 {
        return Err(Error::contract("a single patch has no seams"));
    }
    let (h, w, p) = (grid.height(), grid.width(), grid.patch);
    let d = img.data();
    let at = |ch: usize, y: usize, x: usize| d[(ch * h + y) * w + x];

    let mut vertical = vec![0.0; grid.cols];
    let mut horizontal = vec![0.0; grid.rows];
    let (mut interior, mut n_interior) = (0.0, 0usize);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    let diff = (at(ch, y, x + 1) - at(ch, y, x)).abs();
                    if (x + 1) % p == 0 {
                        vertical[(x + 1) / p] += diff;
                    } else {
                        interior += diff;
                        n_interior += 1;
                    }
                }
                if y + 1 < h {
                    let diff = (at(ch, y + 1, x) - at(ch, y, x)).abs();
                    if (y + 1) % p == 0 {
                        horizontal[(y + 1) / p] += diff;
                    } else {
                        interior += diff;
                        n_interior += 1;
                    }
                }
            }
        }
    }
    let per_line = |len: usize| (c * len) as f64;
    let mut seams = Vec::new();
    for k in 1..grid.cols {
        seams.push(SeamLine {
            axis: SeamAxis::Vertical,
            index: k,
            mean: vertical[k] / per_line(h),
        });
    }
    for k in 1..grid.rows {
        seams.push(SeamLine {
            axis: SeamAxis::Horizontal,
            index: k,
            mean: horizontal[k] / per_line(w),
        });
    }
    let n_seam = c * (h * (grid.cols - 1) + w * (grid.rows - 1));
    let seam_mean = (vertical.iter().sum::<f64>() + horizontal.iter().sum::<f64>()) / n_seam as f64;
    let interior_mean = if n_interior == 0 { 0.0 } else { interior / n_interior as f64 };
    let ratio = if seam_mean == 0.0 && interior_mean == 0.0 {
        1.0
    } else {
        seam_mean / interior_mean.max(f64::EPSILON)
    };
    Ok(SeamReport {
        seam_mean,
        interior_mean,
        ratio,
        seams,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_scores_one() {
        let g = PatchGrid::new(2, 3, 4).unwrap();
        let r = seam_score(&Tensor::full(&[3, 8, 12], 0.3), &g).unwrap();
        assert_eq!((r.seam_mean, r.interior_mean, r.ratio), (0.0, 0.0, 1.0));
    }

    #[test]
    fn step_edge_on_a_seam() {
        let g = PatchGrid::new(1, 2, 4).unwrap();
        let img = Tensor::from_fn(&[1, 4, 8], |k| if k % 8 >= 4 { 1.0 } else { 0.0 });
        let r = seam_score(&img, &g).unwrap();
        assert_eq!(r.seam_mean, 1.0);
        assert_eq!(r.interior_mean, 0.0);
        assert!(r.ratio > 1e15);
        assert_eq!(r.seams, vec![SeamLine { axis: SeamAxis::Vertical, index: 1, mean: 1.0 }]);
    }

    #[test]
    fn linear_ramp_scores_one() {
        let g = PatchGrid::new(3, 4, 8).unwrap();
        let (h, w) = (24, 32);
        // Equal slopes along both axes keep every neighbour difference identical.
        let img = Tensor::from_fn(&[3, h, w], |k| {
            let r = k % (h * w);
            0.01 * (r / w) as f64 + 0.01 * (r % w) as f64 - 0.5
        });
        let r = seam_score(&img, &g).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-6, "{}", r.ratio);
    }

    #[test]
    fn rejects_mismatch_and_single_patch() {
        let g = PatchGrid::new(2, 2, 4).unwrap();
        assert!(seam_score(&Tensor::zeros(&[3, 8, 9]), &g).is_err());
        let one = PatchGrid::new(1, 1, 4).unwrap();
        assert!(seam_score(&Tensor::zeros(&[3, 4, 4]), &one).is_err());
    }

    proptest! {
        #[test]
        fn patch_aligned_translation_keeps_score(seed in 0u64..1000, a in 1usize..3, b in 1usize..3) {
            let p = 4;
            let grid = PatchGrid::new(5, 5, p).unwrap();
            let block = Tensor::randn(&[3, 2 * p, 2 * p], &mut ChaCha8Rng::seed_from_u64(seed));
            let place = |i: usize, j: usize| {
                let mut canvas = Tensor::full(&[3, 5 * p, 5 * p], 0.25);
                canvas.paste(&block, i * p, j * p).unwrap();
                seam_score(&canvas, &grid).unwrap()
            };
            let (r0, r1) = (place(1, 1), place(a, b));
            prop_assert!((r0.ratio - r1.ratio).abs() <= 1e-12 * r0.ratio.abs().max(1.0));
            prop_assert!((r0.seam_mean - r1.seam_mean).abs() <= 1e-12);
        }
    }
}
