//! Trajectory losses, the AdamW optimizer and mini-batch training with
//! truncated backpropagation through time.

mod adamw;
mod loss;
mod trainer;

pub use adamw::{add_grads, zero_grads, AdamW, PartGrads};
pub use loss::{batch_loss, degenerate_steps, step_weights, trajectory_loss, LossKind, DEGENERATE_NORM};
pub use trainer::{
    finetune, group_gradients, pretrain, train, training_stream, EpochRecord, EpochWriter, TrainConfig,
};
