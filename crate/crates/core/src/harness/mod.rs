//! Synthetic tasks, AdamW training and evaluation metrics.

mod optim;
mod task;
mod train;

pub use optim::{clip_global_norm, AdamW, AdamWConfig, Scheduler, SchedulerKind};
pub use task::{stream, Example, ProgressionTask, Purpose, SparseSample, SparseSignalTask};
pub use train::{
    evaluate, fmt17, init_model, label_rank, metrics_csv, train, EpochRecord, EvalMetrics, RunSummary, Split,
    TrainConfig, TrainOutcome,
};
