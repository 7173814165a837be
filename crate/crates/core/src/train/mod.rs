//! Optimization, training loops and evaluation.

mod metrics;
mod optim;

pub use metrics::{auc, roc_curve, Averages, ClassMetrics, MetricsReport};
pub use optim::{cosine_lr, AdamW, Group, Schedule};
mod loops;

pub use loops::{
    build_kd_modules, evaluate, history_csv, parse_history, predict, train_distill, train_supervised, write_history,
    DistillConfig, EpochRecord, HistoryRow, KdMode, TrainConfig, TrainOutcome, BN_MOMENTUM, HISTORY_HEADER,
};
