//! Training with early stopping, the encoder pre-training protocol,
//! LOSO placement experiments with HMM smoothing, metrics, attention
//! tables and report files.

mod checks;
mod config;
mod experiment;
mod interpret;
mod metrics;
mod report;
mod train;

pub use checks::{gradcheck_suite, CheckResult, LAYER_TOLERANCE, MODEL_TOLERANCE};
pub use config::{LossKind, Pretrain, TrainConfig};
pub use experiment::{
    pretrain_protocol, pretrain_stage1, pretrain_stage2, run_experiment, smooth_predictions, EvalReport,
    ExperimentConfig, ExperimentKind, FoldResult, PooledPredictions, RowSummary,
};
pub use interpret::{interpret_predictions, interpretability_report, InterpretReport};
pub use metrics::{
    confusion_matrix, metrics, metrics_over, roc_curve, roc_per_class, ClassMetrics, Metrics, RocCurve, Summary,
};
pub use report::{confusion_text, interpret_text, metrics_text, table_text, write_report, Manifest};
pub use train::{evaluate_bags, train, train_model, EpochRecord, TrainOutcome};
