//! The three training stages and the no-distillation baseline.

mod config;
mod optim;
mod stages;
mod train;

pub use config::{ArchConfig, OptimizerKind, TrainConfig};
pub use optim::OptimizerState;
pub use stages::{
    dataset_inputs, distill_ms, finetune_rf, pretrain_ap, softmax_objective, teacher_logits, train_from_scratch,
    train_plain, StageData, TransferPlan,
};
pub use train::{
    format_log, logit_accuracy, predict_logits, train, train_epochs, EpochLog, Objective, Targets, TrainOutcome,
    TrainSet, TrainState, ValSet,
};
