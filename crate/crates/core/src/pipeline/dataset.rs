use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};

use crate::compute::Tensor;
use crate::conditioning::read_embedding_file;
use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::training::epoch_permutation;

/// Leading bytes of a raw planar tensor file.
pub const RAW_MAGIC: &[u8; 4] = b"PDMF";

/// Maps an 8-bit sample to `[-1, 1]`.
pub fn unit_from_u8(v: u8) -> f64 {
    2.0 * f64::from(v) / 255.0 - 1.0
}

pub fn u8_from_unit(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Center-crops to the target aspect ratio, then resizes.
fn fit_to(img: DynamicImage, height: usize, width: usize) -> DynamicImage {
    let (w, h) = (img.width() as u64, img.height() as u64);
    let (tw, th) = (width as u64, height as u64);
    let img = if w * th > h * tw {
        let cw = h * tw / th;
        img.crop_imm(((w - cw) / 2) as u32, 0, cw as u32, h as u32)
    } else if w * th < h * tw {
        let ch = w * th / tw;
        img.crop_imm(0, ((h - ch) / 2) as u32, w as u32, ch as u32)
    } else {
        img
    };
    if img.width() as usize == width && img.height() as usize == height {
        img
    } else {
        img.resize_exact(width as u32, height as u32, FilterType::Triangle)
    }
}

/// Reads an RGB PNG as `[3, H, W]` in `[-1, 1]`, optionally fitted to `size = (H, W)`.
pub fn read_png(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let img = match size {
        Some((h, w)) => fit_to(img, h, w),
        None => img,
    };
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |k| {
        let (c, r) = (k / (h * w), k % (h * w));
        unit_from_u8(raw[r * 3 + c])
    }))
}

/// Writes a 1- or 3-channel image in `[-1, 1]` as PNG.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    let d = img.data();
    let px = |ch: usize, y: u32, x: u32| u8_from_unit(d[(ch * h + y as usize) * w + x as usize]);
    let out = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([px(0, y, x)]))),
        3 => {
            let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| image::Rgb([px(0, y, x), px(1, y, x), px(2, y, x)]));
            DynamicImage::ImageRgb8(buf)
        }
        _ => return Err(Error::dim(format!("cannot write a {c}-channel image as PNG"))),
    };
    out.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads `PDMF`, `u32 C, H, W` (little endian), then planar `f32`s.
pub fn read_raw(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::format(path, "not a raw tensor file"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().expect("4 bytes")) as usize;
    let shape = [word(1), word(2), word(3)];
    let n: usize = shape.iter().product();
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(path, format!("expected {n} floats for shape {shape:?}")));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(&shape, data)
}

/// Writes a `[C, H, W]` tensor; values are rounded to `f32`.
pub fn write_raw(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    let mut bytes = Vec::with_capacity(16 + 4 * img.len());
    bytes.extend_from_slice(RAW_MAGIC);
    for d in [c, h, w] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in img.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads either format, choosing by extension.
pub fn read_image(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor> {
    let raw = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pdmf"));
    let img = if raw { read_raw(path)? } else { read_png(path, size)? };
    if let Some((h, w)) = size {
        let (_, ih, iw) = img.dims3()?;
        if (ih, iw) != (h, w) {
            return Err(Error::format(path, format!("{ih}×{iw} image, expected {h}×{w}")));
        }
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Image files; an image's id is its position here.
    pub images: Vec<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Precomputed global codes, one row per manifest entry.
    pub embeddings: Option<PathBuf>,
}

impl DatasetManifest {
    /// Every `.png` and `.pdmf` file in `dir`, sorted by name.
    pub fn from_dir(dir: &Path, height: usize, width: usize, patch: usize) -> Result<Self> {
        let mut images: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pdmf"))
            })
            .collect();
        images.sort();
        Ok(Self {
            images,
            height,
            width,
            patch,
            embeddings: None,
        })
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "{}×{} images do not split into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        PatchGrid::new(self.height / self.patch, self.width / self.patch, self.patch)
    }
}

/// Decoded images plus whatever could not be read.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    /// Manifest index of each loaded image.
    pub sources: Vec<usize>,
    /// Imported codes of the loaded images, `[n, dim]`.
    pub embeddings: Option<Tensor>,
    pub skipped: Vec<(PathBuf, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Visiting order of epoch `epoch`, reproducible from `seed`.
    pub fn epoch(&self, seed: u64, epoch: usize) -> impl Iterator<Item = (usize, &Tensor)> {
        epoch_permutation(self.len(), seed, epoch).into_iter().map(|i| (i, &self.images[i]))
    }
}

/// Loads every manifest image, skipping unreadable ones with a warning.
pub fn ingest(manifest: &DatasetManifest, code_dim: usize) -> Result<Dataset> {
    let grid = manifest.grid()?;
    let mut images = Vec::new();
    let mut sources = Vec::new();
    let mut skipped = Vec::new();
    for (k, path) in manifest.images.iter().enumerate() {
        match read_image(path, Some((manifest.height, manifest.width))).and_then(|img| grid.check_image(&img).map(|_| img)) {
            Ok(img) => {
                images.push(img);
                sources.push(k);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push((path.clone(), e.to_string()));
            }
        }
    }
    if images.is_empty() {
        return Err(Error::contract(format!(
            "no usable images among {} manifest entries ({} skipped)",
            manifest.images.len(),
            skipped.len()
        )));
    }
    let embeddings = match &manifest.embeddings {
        Some(path) => {
            let all = read_embedding_file(path, code_dim)?;
            if all.shape()[0] != manifest.images.len() {
                return Err(Error::format(
                    path,
                    format!("{} rows for {} manifest images", all.shape()[0], manifest.images.len()),
                ));
            }
            let rows: Result<Vec<Tensor>> = sources.iter().map(|&k| all.narrow0(k, 1)).collect();
            Some(Tensor::concat0(&rows?.iter().collect::<Vec<_>>())?)
        }
        None => None,
    };
    Ok(Dataset {
        images,
        sources,
        embeddings,
        skipped,
    })
}
