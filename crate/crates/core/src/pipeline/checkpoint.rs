//! Binary checkpoints: magic, format version, a JSON header with configs and
//! tensor names/shapes, then every value as little-endian `f64`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{AdamConfig, AdamState, ParamStore, Tensor};
use crate::conditioning::{CodeStats, EmbeddingSource};
use crate::error::{Error, Result};
use crate::network::PatchDm;
use crate::training::{LatentState, LatentTrainConfig, RunningLoss, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PATCHDM\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer and rng position of an interrupted run.
#[derive(Clone, Debug)]
pub struct Progress {
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub loss: RunningLoss,
}

#[derive(Clone, Debug)]
pub struct LatentCheckpoint {
    pub config: LatentTrainConfig,
    pub state: LatentState,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: PatchDm,
    /// Absent in inference-only checkpoints.
    pub progress: Option<Progress>,
    pub latent: Option<LatentCheckpoint>,
}

impl Checkpoint {
    pub fn from_state(config: &TrainConfig, state: &TrainState) -> Self {
        Self {
            config: config.clone(),
            model: state.model.clone(),
            progress: Some(Progress {
                adam: state.adam.clone(),
                rng: state.rng.clone(),
                step: state.step,
                loss: state.loss,
            }),
            latent: None,
        }
    }

    pub fn inference_only(config: &TrainConfig, model: PatchDm) -> Self {
        Self {
            config: config.clone(),
            model,
            progress: None,
            latent: None,
        }
    }

    /// A trainable state; an inference-only checkpoint restarts the optimizer.
    pub fn into_state(self) -> TrainState {
        let progress = self.progress.unwrap_or_else(|| Progress {
            adam: AdamState::new(self.config.adam, &self.model.store),
            rng: {
                let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
                r.set_stream(1);
                r
            },
            step: 0,
            loss: RunningLoss::default(),
        });
        TrainState {
            model: self.model,
            adam: progress.adam,
            rng: progress.rng,
            step: progress.step,
            loss: progress.loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct RngHeader {
    seed: [u8; 32],
    stream: u64,
    /// Decimal string; JSON numbers cannot carry 128 bits.
    word_pos: String,
}

impl RngHeader {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self, path: &Path) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::format(path, format!("bad rng position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProgressHeader {
    step: usize,
    loss: RunningLoss,
    rng: RngHeader,
    adam: AdamConfig,
    adam_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LatentHeader {
    config: LatentTrainConfig,
    params: Vec<TensorHeader>,
    stats: Option<CodeStats>,
    progress: ProgressHeader,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    params: Vec<TensorHeader>,
    table_stats: Option<CodeStats>,
    progress: Option<ProgressHeader>,
    latent: Option<LatentHeader>,
}

fn tensor_headers(store: &ParamStore) -> Vec<TensorHeader> {
    store
        .iter()
        .map(|(_, p)| TensorHeader {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect()
}

fn progress_header(adam: &AdamState, rng: &ChaCha8Rng, step: usize, loss: RunningLoss) -> ProgressHeader {
    ProgressHeader {
        step,
        loss,
        rng: RngHeader::of(rng),
        adam: adam.config,
        adam_step: adam.step,
    }
}

fn push_all<'a>(body: &mut Vec<u8>, tensors: impl Iterator<Item = &'a Tensor>) {
    for t in tensors {
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn push_store_and_adam(body: &mut Vec<u8>, store: &ParamStore, adam: Option<&AdamState>) {
    push_all(body, store.iter().map(|(_, p)| &p.value));
    if let Some(a) = adam {
        push_all(body, a.m.iter());
        push_all(body, a.v.iter());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.model.config != ckpt.config.model {
        return Err(Error::contract("model config differs from the training config"));
    }
    let mut adam_p = ckpt.progress.as_ref().map(|p| p.adam.clone());
    if let Some(a) = adam_p.as_mut() {
        a.sync(&ckpt.model.store);
    }
    let header = Header {
        config: ckpt.config.clone(),
        params: tensor_headers(&ckpt.model.store),
        table_stats: ckpt.model.table.as_ref().and_then(|t| t.stats.clone()),
        progress: ckpt.progress.as_ref().map(|p| progress_header(&p.adam, &p.rng, p.step, p.loss)),
        latent: ckpt.latent.as_ref().map(|l| LatentHeader {
            config: l.config.clone(),
            params: tensor_headers(&l.state.store),
            stats: l.state.stats.clone(),
            progress: progress_header(&l.state.adam, &l.state.rng, l.state.step, l.state.loss),
        }),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::contract(format!("header serialization: {e}")))?;
    let mut body = Vec::new();
    push_store_and_adam(&mut body, &ckpt.model.store, adam_p.as_ref());
    if let Some(l) = &ckpt.latent {
        let mut adam = l.state.adam.clone();
        adam.sync(&l.state.store);
        push_store_and_adam(&mut body, &l.state.store, Some(&adam));
    }
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 + body.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&((body.len() / 8) as u64).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Writes to a sibling temporary file first so a crash never leaves a torn checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(8 * n, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

/// Overwrites `store` with the body values after checking names and shapes.
fn fill_store(r: &mut Reader<'_>, store: &mut ParamStore, expected: &[TensorHeader]) -> Result<()> {
    if expected.len() != store.len() {
        return Err(Error::format(
            r.path,
            format!("{} tensors stored, configuration builds {}", expected.len(), store.len()),
        ));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, th) in ids.into_iter().zip(expected) {
        let p = store.get(id);
        if p.name != th.name || p.value.shape() != th.shape.as_slice() {
            return Err(Error::format(
                r.path,
                format!(
                    "tensor {} {:?} does not match configured {} {:?}",
                    th.name,
                    th.shape,
                    p.name,
                    p.value.shape()
                ),
            ));
        }
        *store.value_mut(id) = r.tensor(&th.shape, &th.name)?;
    }
    Ok(())
}

fn read_adam(r: &mut Reader<'_>, store: &ParamStore, h: &ProgressHeader, label: &str) -> Result<AdamState> {
    let mut adam = AdamState::new(h.adam, store);
    adam.step = h.adam_step;
    let shapes: Vec<Vec<usize>> = store.iter().map(|(_, p)| p.value.shape().to_vec()).collect();
    for (k, s) in shapes.iter().enumerate() {
        adam.m[k] = r.tensor(s, &format!("{label} first moment"))?;
    }
    for (k, s) in shapes.iter().enumerate() {
        adam.v[k] = r.tensor(s, &format!("{label} second moment"))?;
    }
    Ok(adam)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let len = r.u64("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let declared = r.u64("body length")? as usize;
    if bytes.len() - r.pos != 8 * declared {
        return Err(Error::format(
            path,
            format!("body holds {} bytes, header promises {}", bytes.len() - r.pos, 8 * declared),
        ));
    }

    header.config.validate()?;
    let mut model = PatchDm::new(header.config.model.clone(), 0, &EmbeddingSource::RandomNormal)?;
    fill_store(&mut r, &mut model.store, &header.params)?;
    if let Some(t) = model.table.as_mut() {
        t.stats = header.table_stats.clone();
    }
    let progress = match &header.progress {
        Some(h) => Some(Progress {
            adam: read_adam(&mut r, &model.store, h, "optimizer")?,
            rng: h.rng.restore(path)?,
            step: h.step,
            loss: h.loss,
        }),
        None => None,
    };
    let latent = match &header.latent {
        Some(h) => {
            let mut state = LatentState::new(&h.config)?;
            fill_store(&mut r, &mut state.store, &h.params)?;
            state.adam = read_adam(&mut r, &state.store, &h.progress, "latent optimizer")?;
            state.rng = h.progress.rng.restore(path)?;
            state.step = h.progress.step;
            state.loss = h.progress.loss;
            state.stats = h.stats.clone();
            Some(LatentCheckpoint {
                config: h.config.clone(),
                state,
            })
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    Ok(Checkpoint {
        config: header.config,
        model,
        progress,
        latent,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
