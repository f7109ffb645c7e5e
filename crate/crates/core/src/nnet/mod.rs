//! Minimal convolutional network engine with hand-written backpropagation,
//! RMSprop / Nadam, a phased training schedule with plateau decay and early
//! stopping, finite-difference gradient checking and checkpoints.

mod augment;
mod checkpoint;
mod gradcheck;
mod loss;
mod network;
mod optim;
mod tensor;
mod train;

use thiserror::Error;

pub use augment::{AugmentConfig, Augmentation};
pub use checkpoint::{blob_path_for, encode_params, load_checkpoint, save_checkpoint, CheckpointHeader};
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport};
pub use loss::{batch_loss, BinaryTarget, Objective, SquaredError, WeightedBce, PROB_EPS};
pub use network::{Architecture, LayerSpec, Network, Trace, LEAKY_SLOPE};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::{Real, Tensor};
pub use train::{evaluate_loss, gradients, train, Dataset, EpochRecord, Phase, TrainHistory, TrainSchedule};

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("training data is empty")]
    EmptyData,
    #[error("loss diverged in phase {phase}, epoch {epoch}")]
    Diverged { phase: usize, epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
