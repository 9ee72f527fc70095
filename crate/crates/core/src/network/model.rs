use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SemanticEncoder, SemanticEncoderConfig, UNet, UNetConfig};
use crate::compute::{ParamBuilder, ParamStore, Tensor};
use crate::conditioning::{EmbeddingSource, EmbeddingTable};
use crate::error::{Error, Result};

/// Source of the per-image global code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// One optimized vector per training image.
    Table,
    /// A semantic encoder trained jointly with the U-Net.
    JointEncoder,
    /// No global code; the null token is always used.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub embedding_mode: EmbeddingMode,
    /// Rows of the embedding table (table mode only).
    pub table_size: usize,
    pub encoder: SemanticEncoderConfig,
}

impl ModelConfig {
    pub fn toy(table_size: usize) -> Self {
        Self {
            unet: UNetConfig::toy(),
            embedding_mode: EmbeddingMode::Table,
            table_size,
            encoder: SemanticEncoderConfig::toy(),
        }
    }
}

pub const UNET_PREFIX: &str = "unet";
pub const TABLE_PREFIX: &str = "embedding";
pub const ENCODER_PREFIX: &str = "encoder";

/// The patch U-Net together with its global-code source and parameters.
#[derive(Clone, Debug)]
pub struct PatchDm {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub unet: UNet,
    pub table: Option<EmbeddingTable>,
    pub encoder: Option<SemanticEncoder>,
}

impl PatchDm {
    pub fn new(config: ModelConfig, seed: u64, source: &EmbeddingSource) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let unet = UNet::new(&mut pb.sub(UNET_PREFIX), config.unet.clone())?;
        let (table, encoder) = match config.embedding_mode {
            EmbeddingMode::Table => {
                let t = EmbeddingTable::init(&mut pb.sub(TABLE_PREFIX), config.table_size, config.unet.cond_dim, source)?;
                (Some(t), None)
            }
            EmbeddingMode::JointEncoder => {
                if config.encoder.out_dim != config.unet.cond_dim {
                    return Err(Error::config(format!(
                        "encoder emits {}-d codes, U-Net expects {}",
                        config.encoder.out_dim, config.unet.cond_dim
                    )));
                }
                let e = SemanticEncoder::new(&mut pb.sub(ENCODER_PREFIX), config.encoder.clone())?;
                (None, Some(e))
            }
            EmbeddingMode::None => (None, None),
        };
        Ok(Self {
            config,
            store,
            unet,
            table,
            encoder,
        })
    }

    pub fn patch(&self) -> usize {
        self.config.unet.patch
    }

    /// Global code of training image `id` (`image` feeds the joint encoder).
    pub fn global_code(&self, id: usize, image: &Tensor) -> Result<Option<Tensor>> {
        match (&self.table, &self.encoder) {
            (Some(t), _) => Ok(Some(t.lookup(&self.store, id)?.clone())),
            (_, Some(e)) => Ok(Some(e.semantic_encode(&self.store, image)?)),
            _ => Ok(None),
        }
    }

    /// Number of U-Net parameters (excluding table and encoder).
    pub fn unet_parameter_count(&self) -> usize {
        self.store.count_prefix(UNET_PREFIX)
    }
}
