//! Optimization, training loops, checkpoints and reporting.

pub mod batch;
pub mod checkpoint;
pub mod gradients;
pub mod optim;
pub mod report;
pub mod train;

pub use batch::{patch_batch, seg_batch};
pub use checkpoint::{Checkpoint, CheckpointMeta, ModelKind};
pub use gradients::{toy_model_checks, ModelCheck, DEFAULT_JITTER};
pub use optim::{adam_step, cosine_lr, Adam, AdamConfig, OptimState};
pub use report::{aggregate_runs, monitor_value, render_table, EvalReport, MetricSummary, METRIC_NAMES};
pub use train::{
    confusion_over, evaluate, finetune_step, fit, pretrain, CheckpointSelector, EpochRecord, FitResult, History,
    PretrainRun, RunConfig,
};

/// Class-weight search space `(w_neg, w_pos)`.
pub const WEIGHT_GRID: [(f64, f64); 6] =
    [(1.0, 1.0), (1.0, 500.0), (1.0, 1000.0), (1.0, 2000.0), (1.0, 5000.0), (1.0, 10000.0)];

/// Seeds used for multi-run aggregation.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
