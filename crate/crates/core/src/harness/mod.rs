//! Experiment orchestration: run configuration, end-to-end pipeline, the
//! margin sweep, the dynamics-variance ablation, the reward generalization
//! table and persisted metric reports.

mod config;
mod experiments;
mod pipeline;
mod report;

pub use config::{DataConfig, RunConfig};
pub use experiments::{
    default_margin_grid, margin_sweep, mean_reward, reward_generalization_run,
    reward_generalization_test, variance_ablation, AblationReport, AblationSeed,
    GeneralizationSeed, GeneralizationTable, SweepReport, SweepRow, MARGIN_SLACK,
};
pub use pipeline::{
    evaluate, prepare_data, run_pipeline, run_pipeline_on, train_expert_only, train_stage1,
    train_stage2, PreparedData, SeedEval, Stage1,
};
pub use report::{
    aggregates_from_rows, read_csv, write_csv, Aggregate, CsvRow, MarginSummary, MetricsReport,
    References, SeedReport, Timing, REPORT_FORMAT_VERSION,
};
