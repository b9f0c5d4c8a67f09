//! Pre-training engine.

pub mod loss;
pub mod optim;
pub mod schedule;
pub mod train;

pub use loss::{jepa_loss, smooth_l1_value};
pub use train::{
    batch_indices, ema_update, jet_objective, load_weights, lr_schedule, momentum_schedule, pretrain, train_step,
    update_teacher, PretrainOptions, FINAL_CHECKPOINT, LOSS_CSV, LOSS_CSV_HEADER, PretrainOutput, StepMetrics, TrainConfig, TrainState,
};
