use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LatentCheckpoint};
use super::config::{parse_grid, RunConfig};
use super::dataset::{ingest, read_png, write_png, DatasetManifest};
use super::eval::{eval_suite, EvalOptions, FidHook};
use crate::compute::Tensor;
use crate::conditioning::{EmbeddingSource, PositionPlan, GLOBAL_DIM};
use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::network::EmbeddingMode;
use crate::sampling::{
    extend_canvas, extend_resolution_2x, inpaint, outpaint, sample_codes, sample_image, EditSpec, LatentPrior,
    SampleSpec,
};
use crate::synthetic::toy_images;
use crate::training::{fit_latent, resume, LossLog, TrainState};

#[derive(Parser, Debug)]
#[command(name = "patchdm", version, about = "Patch diffusion with feature collage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps, or sampling steps for the generative commands.
    #[arg(long)]
    steps: Option<usize>,
    /// Classifier-free guidance weight.
    #[arg(long)]
    guidance: Option<f64>,
    /// Patch grid as RxC.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ExtendMode {
    Canvas,
    Resolution,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the patch model, resuming from --checkpoint when given.
    Train(Common),
    /// Fit the latent code model to a trained checkpoint's global codes.
    TrainLatent(Common),
    /// Sample one image.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Condition on this training image's code instead of a latent sample.
        #[arg(long)]
        code_id: Option<usize>,
    },
    /// Generate a border of patches around an input PNG.
    Outpaint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        border: usize,
        #[arg(long)]
        code_id: Option<usize>,
    },
    /// Regenerate patches of an input PNG.
    Inpaint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Masked patches as `i,j;i,j;...`.
        #[arg(long)]
        mask: String,
    },
    /// Sample beyond the training grid.
    Extend {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ExtendMode::Canvas)]
        mode: ExtendMode,
        #[arg(long, default_value_t = 1)]
        border: usize,
        #[arg(long)]
        code_id: Option<usize>,
    },
    /// Seam ratios, denoising loss and the optional FID hook.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fid_real: Option<PathBuf>,
        #[arg(long)]
        fid_generated: Option<PathBuf>,
    },
}

/// Runs one command; returns the process exit code (0 ok, 1 failure, 2 usage).
pub fn cli<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code().clamp(0, 255) as u8;
        }
    };
    match run(parsed.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(g) = common.guidance {
        cfg.guidance = g;
    }
    if let Some(p) = common.patch {
        cfg.patch = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_checkpoint(common: &Common) -> Result<Checkpoint> {
    let path = common
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("--checkpoint is required"))?;
    let ckpt = load_checkpoint(path)?;
    if let Some(p) = common.patch {
        if p != ckpt.model.patch() {
            return Err(Error::config(format!("--patch {p} but the checkpoint uses {}", ckpt.model.patch())));
        }
    }
    Ok(ckpt)
}

/// Training images and imported codes, if any.
fn load_images(cfg: &RunConfig) -> Result<(Vec<Tensor>, Option<Tensor>)> {
    match &cfg.data_dir {
        Some(dir) => {
            let mut manifest = DatasetManifest::from_dir(dir, cfg.height, cfg.width, cfg.patch)?;
            manifest.embeddings = cfg.embeddings.clone();
            let data = ingest(&manifest, GLOBAL_DIM)?;
            if !data.skipped.is_empty() {
                log::warn!("{} of {} images skipped", data.skipped.len(), manifest.images.len());
            }
            Ok((data.images, data.embeddings))
        }
        None => {
            if cfg.height != cfg.width {
                return Err(Error::config("synthetic images are square; set height = width"));
            }
            if cfg.embeddings.is_some() {
                return Err(Error::config("embeddings need a data_dir they index"));
            }
            Ok((toy_images(cfg.synthetic_images, cfg.height, cfg.seed), None))
        }
    }
}

fn grid_for(common: &Common, ckpt: &Checkpoint) -> Result<PatchGrid> {
    let (rows, cols) = match &common.grid {
        Some(s) => parse_grid(s)?,
        None => ckpt
            .config
            .image_grid
            .ok_or_else(|| Error::config("checkpoint has no training grid; pass --grid"))?,
    };
    PatchGrid::new(rows, cols, ckpt.model.patch())
}

fn sample_spec(common: &Common, cfg: &RunConfig, grid: PatchGrid) -> SampleSpec {
    SampleSpec {
        sampler: cfg.sampler(),
        guidance: cfg.guidance,
        ..SampleSpec::new(grid, common.steps.unwrap_or(cfg.sample_steps), cfg.seed)
    }
}

/// A training image's code, a latent sample, or no code at all.
fn global_code(ckpt: &Checkpoint, cfg: &RunConfig, code_id: Option<usize>) -> Result<Option<Tensor>> {
    if let Some(id) = code_id {
        let table = ckpt
            .model
            .table
            .as_ref()
            .ok_or_else(|| Error::config("--code-id needs an embedding-table checkpoint"))?;
        return Ok(Some(table.lookup(&ckpt.model.store, id)?.clone()));
    }
    match &ckpt.latent {
        Some(l) => {
            let sched = l.config.schedule.build()?;
            let prior = LatentPrior {
                net: &l.state.net,
                store: &l.state.store,
                stats: l.state.stats.as_ref(),
                sched: &sched,
            };
            let codes = sample_codes(&prior, 1, cfg.latent_sample_steps, 0.0, cfg.seed)?;
            Ok(Some(codes.reshape(&[GLOBAL_DIM])?))
        }
        None => Ok(None),
    }
}

fn write_out(common: &Common, default: &str, img: &Tensor) -> Result<()> {
    let path = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    write_png(&path, img)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn parse_mask(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(';')
        .filter(|b| !b.trim().is_empty())
        .map(|b| {
            let bad = || Error::config(format!("mask block {b:?} is not i,j"));
            let (i, j) = b.split_once(',').ok_or_else(bad)?;
            Ok((i.trim().parse().map_err(|_| bad())?, j.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn train(common: &Common) -> Result<()> {
    let mut cfg = run_config(common)?;
    if let Some(s) = common.steps {
        cfg.steps = s;
    }
    log::info!("run configuration:\n{}", cfg.to_toml());
    let (images, imported) = load_images(&cfg)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.checkpoint.clone());
    let (config, mut state) = match &common.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let config = crate::training::TrainConfig {
                steps: cfg.steps,
                ..ckpt.config.clone()
            };
            (config, ckpt.into_state())
        }
        None => {
            let config = cfg.train_config(images.len())?;
            let source = match imported {
                Some(t) => EmbeddingSource::Imported(t),
                None => EmbeddingSource::RandomNormal,
            };
            let state = TrainState::new(&config, &source)?;
            (config, state)
        }
    };
    let mut log = match &cfg.loss_log {
        Some(p) if state.step > 0 => Some(LossLog::append(p)?),
        Some(p) => Some(LossLog::create(p)?),
        None => None,
    };
    let every = cfg.checkpoint_every;
    let losses = resume(&mut state, &config, &images, config.steps, log.as_mut(), |s| {
        if every > 0 && s.step % every == 0 {
            save_checkpoint(&Checkpoint::from_state(&config, s), &out)?;
        }
        Ok(())
    })?;
    save_checkpoint(&Checkpoint::from_state(&config, &state), &out)?;
    log::info!(
        "trained to step {} (last loss {:.5}); checkpoint {}",
        state.step,
        losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn train_latent(common: &Common) -> Result<()> {
    let cfg = run_config(common)?;
    let mut ckpt = require_checkpoint(common)?;
    let mut lc = cfg.latent_config();
    if let Some(s) = common.steps {
        lc.steps = s;
    }
    let codes = match ckpt.config.model.embedding_mode {
        EmbeddingMode::Table => {
            let table = ckpt.model.table.as_ref().expect("table mode builds a table");
            table.matrix(&ckpt.model.store)?
        }
        EmbeddingMode::JointEncoder => {
            let (images, _) = load_images(&cfg)?;
            let rows: Result<Vec<Tensor>> = images
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let c = ckpt.model.global_code(i, img)?.expect("encoder mode yields codes");
                    c.reshape(&[1, GLOBAL_DIM])
                })
                .collect();
            Tensor::concat0(&rows?.iter().collect::<Vec<_>>())?
        }
        EmbeddingMode::None => return Err(Error::config("this checkpoint has no global codes to model")),
    };
    let state = fit_latent(&lc, &codes, cfg.loss_log.as_deref())?;
    log::info!("latent model trained for {} steps, loss ema {:.5}", state.step, state.loss.ema);
    ckpt.latent = Some(LatentCheckpoint { config: lc, state });
    let out = common
        .out
        .clone()
        .or_else(|| common.checkpoint.clone())
        .expect("checkpoint was required");
    save_checkpoint(&ckpt, &out)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(common) => train(&common),
        Command::TrainLatent(common) => train_latent(&common),
        Command::Sample { common, code_id } => {
            let cfg = run_config(&common)?;
            let ckpt = require_checkpoint(&common)?;
            let spec = sample_spec(&common, &cfg, grid_for(&common, &ckpt)?);
            let sched = ckpt.config.schedule.build()?;
            let code = global_code(&ckpt, &cfg, code_id)?;
            let img = sample_image(&ckpt.model, &sched, &spec, code.as_ref())?;
            write_out(&common, "sample.png", &img)
        }
        Command::Outpaint {
            common,
            input,
            border,
            code_id,
        } => {
            let cfg = run_config(&common)?;
            let ckpt = require_checkpoint(&common)?;
            let image = read_png(&input, None)?;
            let (edit, grid) = EditSpec::outpaint(&image, ckpt.model.patch(), border)?;
            let spec = SampleSpec {
                positions: PositionPlan::bordered(grid.rows - 2 * border, grid.cols - 2 * border, border),
                ..sample_spec(&common, &cfg, grid)
            };
            let sched = ckpt.config.schedule.build()?;
            let code = global_code(&ckpt, &cfg, code_id)?;
            let img = outpaint(&ckpt.model, &sched, &edit, &spec, code.as_ref())?;
            write_out(&common, "outpaint.png", &img)
        }
        Command::Inpaint { common, input, mask } => {
            let cfg = run_config(&common)?;
            let ckpt = require_checkpoint(&common)?;
            let image = read_png(&input, None)?;
            let (_, h, w) = image.dims3()?;
            let p = ckpt.model.patch();
            if h % p != 0 || w % p != 0 {
                return Err(Error::dim(format!("{h}×{w} input does not split into {p}-pixel patches")));
            }
            let grid = PatchGrid::new(h / p, w / p, p)?;
            let edit = EditSpec::inpaint(&image, &grid, &parse_mask(&mask)?)?;
            let sched = ckpt.config.schedule.build()?;
            let img = inpaint(&ckpt.model, &sched, &edit, &sample_spec(&common, &cfg, grid))?;
            write_out(&common, "inpaint.png", &img)
        }
        Command::Extend {
            common,
            mode,
            border,
            code_id,
        } => {
            let cfg = run_config(&common)?;
            let ckpt = require_checkpoint(&common)?;
            let spec = sample_spec(&common, &cfg, grid_for(&common, &ckpt)?);
            let sched = ckpt.config.schedule.build()?;
            let code = global_code(&ckpt, &cfg, code_id)?;
            let img = match mode {
                ExtendMode::Canvas => extend_canvas(&ckpt.model, &sched, &spec, code.as_ref(), border)?,
                ExtendMode::Resolution => extend_resolution_2x(&ckpt.model, &sched, &spec, code.as_ref())?,
            };
            write_out(&common, "extend.png", &img)
        }
        Command::Eval {
            common,
            fid_real,
            fid_generated,
        } => {
            let cfg = run_config(&common)?;
            let ckpt = require_checkpoint(&common)?;
            let (images, _) = load_images(&cfg)?;
            let fid = (fid_real.is_some() || fid_generated.is_some()).then_some(FidHook {
                real: fid_real,
                generated: fid_generated,
            });
            let opts = EvalOptions {
                seeds: cfg.eval_seeds,
                base_seed: cfg.seed,
                grid: grid_for(&common, &ckpt)?,
                steps: common.steps.unwrap_or(cfg.sample_steps),
                fixed_t: cfg.eval_t,
                fid,
            };
            let sched = ckpt.config.schedule.build()?;
            let report = eval_suite(&ckpt.model, &sched, &images, &opts)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("metrics.csv"));
            report.write_csv(&out)?;
            log::info!(
                "seam ratio means: collage {:.4}, no-collage {:.4}, pixel-fixed {:.4}, pixel-random {:.4}",
                report.mean(|r| r.collage),
                report.mean(|r| r.no_collage),
                report.mean(|r| r.pixel_fixed),
                report.mean(|r| r.pixel_random)
            );
            if let Some(f) = report.fid {
                log::info!("FID {f:.4}");
            }
            Ok(())
        }
    }
}

/// [`cli`] with the program name prepended.
pub fn cli_args(args: &[&str]) -> u8 {
    cli(std::iter::once("patchdm").chain(args.iter().copied()))
}
