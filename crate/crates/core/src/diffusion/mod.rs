//! DDPM forward and reverse processes around a small instrumented U-Net.
//!
//! Timestep convention: `t = 0` is the clean image, `t = T - 1` is (almost)
//! pure noise. Training and sampling only use `t >= 1`.

mod checkpoint;
mod hooks;
mod sample;
mod schedule;
mod train;
mod unet;

use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use hooks::{CaptureKind, HookRegistry};
pub use sample::{p_sample_loop, prediction_accuracy, EvalBatch, NoisePredictor};
pub use schedule::{cosine_schedule, q_sample, NoiseSchedule, COSINE_OFFSET};
pub use train::{train, write_loss_curve, TrainConfig, TrainOutcome};
pub use unet::{
    attention_block, res_block, timestep_features, AttentionParams, AttentionStage, AttentionTaps, NoTaps, ResBlockParams,
    StageHeads, UNet, UNetConfig, ATTENTION_STAGES, LAYER_ORDER,
};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} out of range for a {timesteps}-step schedule")]
    TimestepOutOfRange { t: usize, timesteps: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown hook target `{0}`")]
    UnknownHook(String),
    #[error("intervention: {0}")]
    Intervention(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;
