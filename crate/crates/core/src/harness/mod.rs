//! Scenario configuration, seeded simulation and the Monte-Carlo
//! experiment suites.

pub mod config;
pub mod experiment;
pub mod report;
pub mod simulate;

pub use config::{MonteCarloPlan, RmsePlan, RocPlan, ScenarioConfig, StagePlan, Threshold, CONFIG_VERSION};
pub use experiment::{
    run_design, run_estimate, run_rmse_experiment, run_roc_experiment, run_trace, RmseExperiment, RocExperiment, TraceExperiment,
};
pub use report::{ExperimentReport, ReportKind, ReportMetadata, Rows};
pub use simulate::{generate_observations, Draw, Observation, SensorSimulator, TestSet};
