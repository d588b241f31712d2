//! Losses, optimizer and the three-stage training schedule.

pub mod losses;
pub mod optim;
mod train;

pub use losses::{Extractor, LossWeights};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use train::{
    evaluate_joint, fit_context, stage_gradients, stage_windows, train, write_loss_log, DataConfig,
    LossRecord, LossTerms, Stage, TrainConfig, TrainOutcome, TrainSchedule, CONTEXT_PREFIXES,
    LOG_HEADER,
};
