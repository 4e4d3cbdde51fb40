//! Model assembly, losses, optimizers, the training loop and checkpoints.

mod checkpoint;
mod config;
mod loss;
mod model;
mod optim;
mod split;
mod trainer;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError,
    CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ClassWeighting, OptimizerChoice, TrainConfig, CONFIG_KEYS};
pub use loss::{cross_entropy_loss, weighted_cross_entropy_loss, LossKind};
pub use model::{
    build_paper_model, paper_model, BatchOutcome, ForwardCache, HeadMode, Layer, Model,
    INPUT_CHANNELS, NUM_CLASSES, PAPER_IMAGE_SIZE,
};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind};
pub use split::{split_dataset, split_indices, validate_fraction, Labeled, Split};
pub use trainer::{
    class_weights, predict_scores, stack_images, train, EpochStats, MetricsSink, Sample,
    TrainOutcome,
};

use thiserror::Error;

use crate::nn::NnError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("topology mismatch: {0}")]
    Topology(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    /// True when training diverged rather than being misconfigured.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. }
        )
    }
}
