//! Experiment plumbing: configuration, training, evaluation, the ablation
//! runner and its report/grid outputs.

mod ablation;
mod config;
mod gradcheck_suite;
mod report;
mod train;

pub use ablation::{
    check_base, run_ablation, write_ablation, AblationOutcome, AblationReport, AblationRow, Variant, VariantRun,
};
pub use config::{DataSource, ExperimentConfig, LossSpec, OptimSpec, SplitSpec};
pub use gradcheck_suite::{gradcheck_suite, GradcheckEntry, GRADCHECK_TOLERANCE};
pub use report::{emit_image_grid, emit_report, image_grid, render_report, ReportFormat, COLUMNS, GRID_VARIANTS};
pub use train::{
    evaluate, evaluate_baseline, initial_model, metrics_csv, predict, resume, train, train_with_snapshots, Evaluation,
    History, HistoryEntry, SampleMetrics,
};
