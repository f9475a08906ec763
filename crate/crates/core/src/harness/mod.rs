//! Experiment orchestration and reporting.

mod config;
mod demo;
mod metrics;
mod pipeline;
mod report;

pub use config::{
    AttackEntry, DatasetSpec, ExperimentConfig, ModelEntry, ModelSpec, SCHEMA_VERSION,
};
pub use demo::{grid_csv, two_rings_demo, write_demo, DemoConfig, DemoOutcome, GridPoint, GRID_HEADER};
pub use metrics::{
    evaluate_crafted, min_perturbation, run_attack_eval, summarize_setting, transfer_eval,
    MinPerturbation, SettingMetrics, TransferMetrics,
};
pub use pipeline::{
    attack_cell, attack_rows, batch_path, cell_applies, calibrate_model, cell_rng, clean_rows, load_data,
    model_path, predict_test, run_experiment, run_pipeline, train_and_calibrate, train_model,
    transfer_rows, PipelineOutcome, PreparedData, TrainedModel,
};
pub use report::{read_report, report_csv, write_report, ReportRow, RunMetadata, REPORT_HEADER};
