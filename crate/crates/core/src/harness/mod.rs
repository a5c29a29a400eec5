//! Training regimes, evaluation, gating reports, checkpoints and the CLI.

mod checkpoint;
mod cli;
mod config;
mod eval;
mod gradsuite;
mod model;
mod report;
mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, OptimizerState, TensorEntry, CHECKPOINT_FORMAT_VERSION,
    CHECKPOINT_MAGIC,
};
pub use cli::{cli_main, load_or_generate, CHECKPOINT_FILE, METRICS_JSON, TEST_FILE, TRAIN_FILE};
pub use config::{DataConfig, EvalConfig, ExperimentConfig, SelectionMode, TrainConfig, TrainMode};
pub use eval::{
    accuracy, average_precision, budget_label, evaluate, mean_average_precision, metrics_csv, predict, selections,
    selector_results, top1_hits, BudgetMetrics, METRICS_HEADER,
};
pub use gradsuite::{full_suite, gradcheck_csv, max_rel_err, GRADCHECK_TOLERANCE};
pub use model::{DataDims, Model, HEAVY_TAG, LIGHT_SCSAMPLER_TAG, LIGHT_SELECTOR_TAG};
pub use report::{gating_report, min_max, GatingReport};
pub use train::{joint_loss, lambda_at, standalone_loss, train, EpochLog, StepOutput, TrainOutcome};
