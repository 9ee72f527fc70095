//! Training loops for the patch model and the latent code denoiser.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compute::{AdamConfig, AdamState, Gradients, Graph, ParamBuilder, ParamStore, Tensor, Var};
use crate::conditioning::{CodeStats, DropoutRates, EmbeddingSource, PositionPlan};
use crate::error::{Error, Result};
use crate::geometry::{extract_shifted_target, pad_half_patch, PadFill, PatchGrid, PatchMap};
use crate::network::{collage_vars, LatentDenoiser, LatentDenoiserConfig, ModelConfig, PatchDm};
use crate::schedule::{q_sample, NoiseSchedule, ScheduleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Images per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub steps: usize,
    pub schedule: ScheduleConfig,
    pub dropout: DropoutRates,
    pub pad_fill: PadFill,
    pub seed: u64,
    /// Evaluate the images of a batch on the rayon pool.
    pub parallel: bool,
    /// Patch grid of the training images, kept so samplers can default to it.
    pub image_grid: Option<(usize, usize)>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            batch_size: 16,
            adam: AdamConfig::default(),
            steps: 1000,
            schedule: ScheduleConfig::linear_default(),
            dropout: DropoutRates::default(),
            pad_fill: PadFill::Zeros,
            seed: 0,
            parallel: false,
            image_grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        for (name, p) in [("global", self.dropout.global), ("pos", self.dropout.pos)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} dropout {p} outside [0, 1]")));
            }
        }
        self.model.unet.validate()
    }
}

/// Smoothed loss bookkeeping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningLoss {
    pub last: f64,
    pub ema: f64,
    pub count: u64,
}

impl RunningLoss {
    const DECAY: f64 = 0.98;

    pub fn record(&mut self, loss: f64) {
        self.ema = if self.count == 0 {
            loss
        } else {
            Self::DECAY * self.ema + (1.0 - Self::DECAY) * loss
        };
        self.last = loss;
        self.count += 1;
    }
}

/// Everything needed to continue a patch-model run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: PatchDm,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub loss: RunningLoss,
}

fn run_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl TrainState {
    pub fn new(config: &TrainConfig, source: &EmbeddingSource) -> Result<Self> {
        config.validate()?;
        let model = PatchDm::new(config.model.clone(), config.seed, source)?;
        let adam = AdamState::new(config.adam, &model.store);
        Ok(Self {
            model,
            adam,
            rng: run_rng(config.seed),
            step: 0,
            loss: RunningLoss::default(),
        })
    }
}

/// Dataset indices for optimizer step `step`: consecutive slices of a stream
/// of per-epoch permutations, each seeded by `(seed, epoch)`.
pub fn batch_indices(len: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (step * batch..(step + 1) * batch)
        .map(|k| {
            let epoch = k / len;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_permutation(len, seed, epoch)));
            }
            cached.as_ref().expect("just set").1[k % len]
        })
        .collect()
}

pub fn epoch_permutation(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + epoch as u64);
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Random quantities consumed by one image of a training step.
#[derive(Clone, Debug)]
pub struct ImageDraw {
    pub id: usize,
    pub t: usize,
    pub eps: Tensor,
    pub drop_global: bool,
    pub drop_pos: bool,
    /// Half-patch padded `x_t`.
    pub canvas: Tensor,
}

/// Draws `t`, `ε`, dropout flags and padding for one image, in that order.
pub fn draw_image<R: Rng>(
    id: usize,
    image: &Tensor,
    sched: &NoiseSchedule,
    patch: usize,
    dropout: Option<DropoutRates>,
    fixed_t: Option<usize>,
    fill: PadFill,
    rng: &mut R,
) -> Result<ImageDraw> {
    let t = match fixed_t {
        Some(t) => t,
        None => rng.random_range(1..=sched.steps()),
    };
    let eps = Tensor::randn(image.shape(), rng);
    let (drop_global, drop_pos) = match dropout {
        Some(d) => d.draw(rng),
        None => (false, false),
    };
    let x_t = q_sample(image, t, &eps, sched)?;
    let canvas = pad_half_patch(&x_t, patch, fill, rng)?;
    Ok(ImageDraw {
        id,
        t,
        eps,
        drop_global,
        drop_pos,
        canvas,
    })
}

/// Mean squared error between predicted and true noise over all shifted
/// patches of one image, as a graph scalar.
pub fn image_loss(g: &mut Graph<'_>, model: &PatchDm, image: &Tensor, draw: &ImageDraw) -> Result<Var> {
    let p = model.patch();
    let (_, h, w) = image.dims3()?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::dim(format!("image {h}×{w} not divisible by patch {p}")));
    }
    let grid = PatchGrid::new(h / p, w / p, p)?;
    let plan = PositionPlan::grid(grid.rows, grid.cols);
    let net = &model.unet;
    let pos_dim = model.config.unet.pos_dim;

    let temb = net.time_embedding(g, draw.t)?;
    let global = if draw.drop_global {
        None
    } else if let Some(table) = &model.table {
        Some(g.param(table.param(draw.id)?))
    } else if let Some(enc) = &model.encoder {
        let x0 = g.input(image.clone());
        Some(enc.forward(g, x0)?)
    } else {
        None
    };

    let padded = grid.padded();
    let mut z = PatchMap::new(padded.rows, padded.cols);
    for (a, b) in padded.indices() {
        let pos = if draw.drop_pos { None } else { plan.embed_padded(a, b, pos_dim)? };
        let c = net.cond_vars(g, temb, pos.as_ref(), global)?;
        let x = g.input(draw.canvas.crop(a * p, b * p, p, p)?);
        z.insert(a, b, net.encode(g, x, c)?)?;
    }
    let mut total: Option<Var> = None;
    for (i, j) in grid.indices() {
        let zc = collage_vars(g, &z, i, j)?;
        let pos = if draw.drop_pos { None } else { plan.embed_shifted(i, j, pos_dim)? };
        let c = net.cond_vars(g, temb, pos.as_ref(), global)?;
        let out = net.decode(g, &zc, c)?;
        let target = extract_shifted_target(&draw.eps, &grid, i, j)?;
        let l = g.mse_to(out, target)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    g.scale(total.expect("grid is non-empty"), 1.0 / grid.len() as f64)
}

/// Mean loss over `items` and the gradient of that mean.
pub fn batch_gradients(model: &PatchDm, items: &[(&Tensor, ImageDraw)], parallel: bool) -> Result<(f64, Gradients)> {
    if items.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let one = |(image, draw): &(&Tensor, ImageDraw)| -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&model.store);
        let loss = image_loss(&mut g, model, image, draw)?;
        let value = g.value(loss).data()[0];
        Ok((value, g.backward(loss)?.into_params()))
    };
    let parts: Vec<(f64, Gradients)> = if parallel {
        items.par_iter().map(one).collect::<Result<_>>()?
    } else {
        items.iter().map(one).collect::<Result<_>>()?
    };
    let n = items.len() as f64;
    let mut grads = Gradients::new(model.store.len());
    let mut loss = 0.0;
    for (l, gr) in &parts {
        loss += l;
        grads.merge(gr)?;
    }
    grads.scale(1.0 / n);
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss is {loss}")));
    }
    Ok((loss, grads))
}

/// One optimizer step on `images` (`(dataset id, image)` pairs).
pub fn patchdm_train_step(
    images: &[(usize, &Tensor)],
    state: &mut TrainState,
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<f64> {
    let p = state.model.patch();
    let items = images
        .iter()
        .map(|&(id, img)| {
            let d = draw_image(id, img, sched, p, Some(config.dropout), None, config.pad_fill, &mut state.rng)?;
            Ok((img, d))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = batch_gradients(&state.model, &items, config.parallel)?;
    state.adam.step(&mut state.model.store, &grads)?;
    state.step += 1;
    state.loss.record(loss);
    Ok(loss)
}

/// Mean loss without dropout or parameter updates; `fixed_t` pins the timestep.
pub fn evaluate_loss(
    model: &PatchDm,
    images: &[(usize, &Tensor)],
    sched: &NoiseSchedule,
    fixed_t: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = images
        .iter()
        .map(|&(id, img)| Ok((img, draw_image(id, img, sched, model.patch(), None, fixed_t, PadFill::Zeros, &mut rng)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (img, d) in &items {
        let mut g = Graph::new(&model.store);
        let l = image_loss(&mut g, model, img, d)?;
        total += g.value(l).data()[0];
    }
    Ok(total / items.len() as f64)
}

/// Append-only `step,loss,lr,wall_time` log.
pub struct LossLog {
    file: File,
    started: Instant,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "step,loss,lr,wall_time").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            started: Instant::now(),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            started: Instant::now(),
        })
    }

    pub fn record(&mut self, step: usize, loss: f64, lr: f64) -> Result<()> {
        let secs = self.started.elapsed().as_secs_f64();
        writeln!(self.file, "{step},{loss},{lr},{secs:.3}").map_err(|e| Error::io("loss log", e))
    }
}

/// Trains from scratch for `config.steps` steps.
pub fn fit(config: &TrainConfig, dataset: &[Tensor], source: &EmbeddingSource, log: Option<&Path>) -> Result<TrainState> {
    let mut state = TrainState::new(config, source)?;
    let mut log = log.map(LossLog::create).transpose()?;
    resume(&mut state, config, dataset, config.steps, log.as_mut(), |_| Ok(()))?;
    Ok(state)
}

/// Continues `state` until it has taken `until` steps in total; `hook` runs
/// after every step (e.g. periodic checkpointing).
pub fn resume(
    state: &mut TrainState,
    config: &TrainConfig,
    dataset: &[Tensor],
    until: usize,
    mut log: Option<&mut LossLog>,
    mut hook: impl FnMut(&TrainState) -> Result<()>,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    if let Some(t) = &state.model.table {
        if t.len() != dataset.len() {
            return Err(Error::contract(format!(
                "embedding table has {} rows for {} images",
                t.len(),
                dataset.len()
            )));
        }
    }
    if let Some((rows, cols)) = config.image_grid {
        let grid = PatchGrid::new(rows, cols, config.model.unet.patch)?;
        for img in dataset {
            grid.check_image(img)?;
        }
    }
    let sched = config.schedule.build()?;
    let mut losses = Vec::with_capacity(until.saturating_sub(state.step));
    while state.step < until {
        let ids = batch_indices(dataset.len(), config.batch_size, config.seed, state.step);
        let batch: Vec<(usize, &Tensor)> = ids.iter().map(|&i| (i, &dataset[i])).collect();
        let loss = patchdm_train_step(&batch, state, &sched, config)?;
        if let Some(l) = log.as_deref_mut() {
            l.record(state.step, loss, config.adam.lr)?;
        }
        log::debug!("step {} loss {loss:.5}", state.step);
        losses.push(loss);
        hook(state)?;
    }
    if let Some(t) = state.model.table.as_mut() {
        t.refresh_stats(&state.model.store)?;
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTrainConfig {
    pub denoiser: LatentDenoiserConfig,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub steps: usize,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Anneal the learning rate linearly to zero over `steps`.
    #[serde(default)]
    pub lr_decay: bool,
}

impl Default for LatentTrainConfig {
    fn default() -> Self {
        Self {
            denoiser: LatentDenoiserConfig::default(),
            batch_size: 256,
            adam: AdamConfig {
                weight_decay: 0.01,
                ..AdamConfig::default()
            },
            steps: 1000,
            schedule: ScheduleConfig::constant_default(),
            seed: 0,
            lr_decay: false,
        }
    }
}

/// Latent denoiser with its optimizer and the statistics of its training codes.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub net: LatentDenoiser,
    pub store: ParamStore,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub loss: RunningLoss,
    /// Statistics used to standardize the training codes.
    pub stats: Option<CodeStats>,
}

impl LatentState {
    pub fn new(config: &LatentTrainConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let net = LatentDenoiser::new(&mut ParamBuilder::new(&mut store, &mut init).sub("latent"), config.denoiser.clone())?;
        let adam = AdamState::new(config.adam, &store);
        Ok(Self {
            net,
            store,
            adam,
            rng: run_rng(config.seed),
            step: 0,
            loss: RunningLoss::default(),
            stats: None,
        })
    }
}

/// One optimizer step on a `[B, dim]` batch of standardized codes.
pub fn latent_train_step(codes: &Tensor, state: &mut LatentState, sched: &NoiseSchedule) -> Result<f64> {
    let (b, dim) = codes.dims2()?;
    let ts: Vec<usize> = (0..b).map(|_| state.rng.random_range(1..=sched.steps())).collect();
    let eps = Tensor::randn(&[b, dim], &mut state.rng);
    let mut noisy = codes.clone();
    for (r, &t) in ts.iter().enumerate() {
        let (sa, sn) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        let row = &mut noisy.data_mut()[r * dim..(r + 1) * dim];
        for (x, e) in row.iter_mut().zip(&eps.data()[r * dim..(r + 1) * dim]) {
            *x = sa * *x + sn * e;
        }
    }
    let (loss, grads) = {
        let mut g = Graph::new(&state.store);
        let z = g.input(noisy);
        let out = state.net.forward(&mut g, z, &ts)?;
        let l = g.mse_to(out, eps)?;
        (g.value(l).data()[0], g.backward(l)?.into_params())
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("latent loss is {loss}")));
    }
    state.adam.step(&mut state.store, &grads)?;
    state.step += 1;
    state.loss.record(loss);
    Ok(loss)
}

/// Trains the latent denoiser on raw codes `[n, dim]`, standardizing them first.
pub fn fit_latent(config: &LatentTrainConfig, codes: &Tensor, log: Option<&Path>) -> Result<LatentState> {
    let (n, dim) = codes.dims2()?;
    if n == 0 {
        return Err(Error::contract("no codes to train on"));
    }
    if dim != config.denoiser.dim {
        return Err(Error::dim(format!("codes are {dim}-d, denoiser expects {}", config.denoiser.dim)));
    }
    let stats = CodeStats::fit(codes)?;
    let z = stats.standardize(codes)?;
    let sched = config.schedule.build()?;
    let mut state = LatentState::new(config)?;
    state.stats = Some(stats);
    let mut log = log.map(LossLog::create).transpose()?;
    while state.step < config.steps {
        let ids = batch_indices(n, config.batch_size, config.seed, state.step);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in &ids {
            data.extend_from_slice(&z.data()[i * dim..(i + 1) * dim]);
        }
        let batch = Tensor::new(&[ids.len(), dim], data)?;
        if config.lr_decay {
            state.adam.config.lr = config.adam.lr * (1.0 - state.step as f64 / config.steps as f64);
        }
        let lr = state.adam.config.lr;
        let loss = latent_train_step(&batch, &mut state, &sched)?;
        if let Some(l) = log.as_mut() {
            l.record(state.step, loss, lr)?;
        }
    }
    Ok(state)
}
