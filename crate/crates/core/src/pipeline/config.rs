use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compute::AdamConfig;
use crate::conditioning::{DropoutRates, GLOBAL_DIM, POS_DIM};
use crate::error::{Error, Result};
use crate::geometry::{PadFill, PatchGrid};
use crate::network::{EmbeddingMode, LatentDenoiserConfig, ModelConfig, SemanticEncoderConfig, UNetConfig};
use crate::sampling::Sampler;
use crate::schedule::ScheduleConfig;
use crate::training::{LatentTrainConfig, TrainConfig};

/// Every knob of a run as one flat table of keys. Missing keys take the
/// defaults below; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory of `.png`/`.pdmf` training images.
    pub data_dir: Option<PathBuf>,
    /// Without `data_dir`, train on this many generated shapes images.
    pub synthetic_images: usize,
    /// Embedding import file with one row per training image.
    pub embeddings: Option<PathBuf>,
    pub height: usize,
    pub width: usize,

    pub patch: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub res_blocks: usize,
    pub attention_resolutions: Vec<usize>,
    pub embedding: EmbeddingMode,
    pub encoder_base_channels: usize,
    pub encoder_channel_mult: Vec<usize>,

    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout_global: f64,
    pub dropout_pos: f64,
    /// Standard deviation of the training pad noise; 0 pads with zeros.
    pub pad_noise: f64,
    pub parallel: bool,
    pub checkpoint: PathBuf,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub loss_log: Option<PathBuf>,

    pub latent_layers: usize,
    pub latent_hidden: usize,
    pub latent_steps: usize,
    pub latent_batch_size: usize,
    pub latent_lr: f64,
    pub latent_weight_decay: f64,
    pub latent_lr_decay: bool,

    pub sample_steps: usize,
    /// `ddim` or `ddpm`.
    pub sampler: String,
    pub eta: f64,
    pub guidance: f64,
    pub latent_sample_steps: usize,

    pub eval_seeds: usize,
    pub eval_t: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let unet = UNetConfig::toy();
        let enc = SemanticEncoderConfig::toy();
        Self {
            data_dir: None,
            synthetic_images: 16,
            embeddings: None,
            height: 64,
            width: 64,
            patch: unet.patch,
            base_channels: unet.base_channels,
            channel_mult: unet.channel_mult,
            res_blocks: unet.res_blocks,
            attention_resolutions: unet.attention_resolutions,
            embedding: EmbeddingMode::Table,
            encoder_base_channels: enc.base_channels,
            encoder_channel_mult: enc.channel_mult,
            seed: 0,
            steps: 1000,
            batch_size: 2,
            lr: 2e-3,
            dropout_global: 0.1,
            dropout_pos: 0.5,
            pad_noise: 0.0,
            parallel: false,
            checkpoint: PathBuf::from("patchdm.ckpt"),
            checkpoint_every: 0,
            loss_log: None,
            latent_layers: 4,
            latent_hidden: 512,
            latent_steps: 8000,
            latent_batch_size: 64,
            latent_lr: 3e-4,
            latent_weight_decay: 0.01,
            latent_lr_decay: true,
            sample_steps: 50,
            sampler: "ddim".into(),
            eta: 0.0,
            guidance: 0.0,
            latent_sample_steps: 1000,
            eval_seeds: 8,
            eval_t: 500,
        }
    }
}

/// Parses `RxC`, e.g. `4x4`.
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("grid {s:?} is not of the form RxC"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let rows: usize = r.trim().parse().map_err(|_| bad())?;
    let cols: usize = c.trim().parse().map_err(|_| bad())?;
    if rows == 0 || cols == 0 {
        return Err(bad());
    }
    Ok((rows, cols))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.sampler != "ddim" && self.sampler != "ddpm" {
            return Err(Error::config(format!("sampler {:?} is neither ddim nor ddpm", self.sampler)));
        }
        if self.embedding == EmbeddingMode::JointEncoder && self.height != self.width {
            return Err(Error::config("the joint encoder needs square images"));
        }
        if self.data_dir.is_none() && self.synthetic_images == 0 {
            return Err(Error::config("set data_dir or synthetic_images"));
        }
        if self.pad_noise < 0.0 {
            return Err(Error::config("pad_noise must be non-negative"));
        }
        if self.sample_steps == 0 {
            return Err(Error::config("sample_steps must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "{}×{} images do not split into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        PatchGrid::new(self.height / self.patch, self.width / self.patch, self.patch)
    }

    pub fn model_config(&self, images: usize) -> ModelConfig {
        ModelConfig {
            unet: UNetConfig {
                patch: self.patch,
                in_channels: 3,
                base_channels: self.base_channels,
                channel_mult: self.channel_mult.clone(),
                res_blocks: self.res_blocks,
                attention_resolutions: self.attention_resolutions.clone(),
                cond_dim: GLOBAL_DIM,
                pos_dim: POS_DIM,
            },
            embedding_mode: self.embedding,
            table_size: images,
            encoder: SemanticEncoderConfig {
                image_size: self.height,
                base_channels: self.encoder_base_channels,
                channel_mult: self.encoder_channel_mult.clone(),
                ..SemanticEncoderConfig::toy()
            },
        }
    }

    pub fn train_config(&self, images: usize) -> Result<TrainConfig> {
        let grid = self.grid()?;
        let config = TrainConfig {
            model: self.model_config(images),
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            steps: self.steps,
            schedule: ScheduleConfig::linear_default(),
            dropout: DropoutRates {
                global: self.dropout_global,
                pos: self.dropout_pos,
            },
            pad_fill: if self.pad_noise > 0.0 {
                PadFill::Noise { sigma: self.pad_noise }
            } else {
                PadFill::Zeros
            },
            seed: self.seed,
            parallel: self.parallel,
            image_grid: Some((grid.rows, grid.cols)),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn latent_config(&self) -> LatentTrainConfig {
        LatentTrainConfig {
            denoiser: LatentDenoiserConfig {
                layers: self.latent_layers,
                hidden: self.latent_hidden,
                ..LatentDenoiserConfig::default()
            },
            batch_size: self.latent_batch_size,
            adam: AdamConfig {
                lr: self.latent_lr,
                weight_decay: self.latent_weight_decay,
                ..AdamConfig::default()
            },
            steps: self.latent_steps,
            schedule: ScheduleConfig::constant_default(),
            seed: self.seed,
            lr_decay: self.latent_lr_decay,
        }
    }

    pub fn sampler(&self) -> Sampler {
        match self.sampler.as_str() {
            "ddpm" => Sampler::Ddpm,
            _ => Sampler::Ddim { eta: self.eta },
        }
    }
}
