//! Downstream tuning: optimizer, schedule, training loop and metrics.

pub mod optim;
mod train;

pub use optim::{lr_schedule, AdamW, AdamWConfig, Param};
pub use train::{
    class_logits, evaluate, train, Budget, EncodedSet, EvalPoint, EvalSet, Metrics, PreparedBatch, RunRecord,
    StepStats, TrainConfig, TrainOutcome, Trainer,
};
