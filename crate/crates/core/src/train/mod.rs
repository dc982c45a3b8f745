//! Staged training: pre-training on pseudo-labeled data, fine-tuning,
//! mixed-tuning and prompt-tuning, with Adam, a warmup schedule and
//! resumable checkpoints.

mod checkpoint;
mod examples;
mod optim;
mod stage;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CKPT_MAGIC};
pub use examples::{audio_features, init_model, load_examples, Example, FeatureConfig, PreparedExample};
pub use optim::{clip_gradients, lr_at_step, optimizer_step, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use stage::{
    batch_schedule, run_stage, train_step, LogEntry, StageConfig, StageData, StageKind, StageOutputs, StepOutput,
};

use thiserror::Error;

use crate::audio::AudioError;
use crate::data::DataError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid stage config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step} on batch {ids:?}")]
    NonFinite { step: u64, ids: Vec<String> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for config {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Engine(#[from] ndiff::NdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;
