// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradients, AdamW, the learning-rate schedule, training loop, checkpoints
//! and multiple-choice evaluation.

mod checkpoint;
mod grad;
mod mcq;
mod optim;
mod train;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, ValPoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use grad::{loss_and_grads, mean_loss};
pub use mcq::{evaluate_mcq, McqItem, McqReport};
pub use optim::{adamw_step, clip_gradients, lr_at_step, AdamWState, TrainConfig};
pub use train::{accumulated_gradients, train, EpochSampler, TrainEvent};
