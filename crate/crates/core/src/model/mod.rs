//! Small multitask network: optional learnable STRF frontend, two
//! stride-2 convolution stages, per-task self-attentive pooling and
//! fully connected heads, trained on a weighted sum of task losses.

pub mod checkpoint;
pub mod layers;
pub mod layout;
pub mod loss;
pub mod net;
pub mod train;

use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointMeta};
pub use layout::{Registry, Slot};
pub use loss::{multitask_loss, LossBreakdown, LossWeights};
pub use net::{Model, ModelConfig, RawOutputs, StrfLayerConfig};
pub use train::{train, Adam, EpochLog, Example, StepLog, TrainConfig, TrainOutcome};

use crate::features::FeatureError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("utterance {id:?} has no {task} label")]
    MissingLabel { id: String, task: &'static str },
    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
