//! Task-mixture training, new-task fine-tuning and gradient verification.

mod adam;
mod gradcheck;
mod loss;
mod trace;
mod train;

pub use adam::{adam_step, AdamConfig, Moments, OptimizerState};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, GroupReport};
pub use loss::{loss_mse, LossKind};
pub use trace::{format_sig6, LossRecord, LossTrace};
pub use train::{
    fine_tune_new_task, steps_per_epoch, train, train_step, train_with_hook, NoHook, TrainConfig,
    TrainHook,
};
