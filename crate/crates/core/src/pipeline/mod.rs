//! Dataset ingestion, checkpoints, run configuration, evaluation metrics and
//! the command-line front end.

mod checkpoint;
mod cli;
mod config;
mod dataset;
mod eval;
mod seam;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, LatentCheckpoint, Progress,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cli::{cli, cli_args};
pub use config::{parse_grid, RunConfig};
pub use dataset::{
    ingest, read_image, read_png, read_raw, u8_from_unit, unit_from_u8, write_png, write_raw, Dataset, DatasetManifest,
    RAW_MAGIC,
};
pub use eval::{eval_suite, frechet_distance, read_features, EvalOptions, EvalReport, EvalRow, FidHook, METRICS_HEADER};
pub use seam::{seam_score, SeamAxis, SeamLine, SeamReport};
